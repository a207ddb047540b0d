use moba_core::action::{parse_action_call, Action, ActionKind, Direction, Distance};
use proptest::prelude::*;

fn direction() -> impl Strategy<Value = Direction> {
    prop_oneof![Just(Direction::Up), Just(Direction::Down), Just(Direction::Left), Just(Direction::Right)]
}

fn distance() -> impl Strategy<Value = Distance> {
    prop_oneof![
        Just(Distance::Short),
        Just(Distance::Medium),
        Just(Distance::Long),
        (1u32..500).prop_map(Distance::Rows),
    ]
}

fn text() -> impl Strategy<Value = String> {
    // Quotes, backslashes, commas, parentheses and newlines all need to survive.
    "[a-zA-Z0-9 ,()\"\\\\\n:é中]{0,24}"
}

fn action() -> impl Strategy<Value = Action> {
    let index = -1i64..200;
    prop_oneof![
        index.clone().prop_map(|index| Action::Click { index }),
        (0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(x, y)| Action::ClickByCoordinate { x, y }),
        index.clone().prop_map(|index| Action::DoubleClick { index }),
        index.clone().prop_map(|index| Action::LongPress { index }),
        (index.clone(), direction(), distance())
            .prop_map(|(index, direction, distance)| Action::Scroll { index, direction, distance }),
        (direction(), distance()).prop_map(|(direction, distance)| Action::Swipe { direction, distance }),
        text().prop_map(|text| Action::Type { text }),
        Just(Action::Back),
        (index, text()).prop_map(|(index, text)| Action::BoxInput { index, text }),
        proptest::option::of(text()).prop_map(|description| Action::OpenApp { description }),
        proptest::option::of("[a-z.]{1,20}").prop_map(|package| Action::CloseApp { package }),
        Just(Action::Failed),
        Just(Action::Finish),
    ]
}

proptest! {
    #[test]
    fn canonical_form_round_trips(a in action()) {
        let text = a.to_string();
        let back = parse_action_call(&text).unwrap();
        prop_assert_eq!(&back, &a);
        prop_assert_eq!(back.to_string(), text);
    }

    #[test]
    fn serde_uses_the_call_form(a in action()) {
        let json = serde_json::to_string(&a).unwrap();
        prop_assert_eq!(serde_json::from_str::<Action>(&json).unwrap(), a);
    }

    #[test]
    fn only_box_input_is_a_combination(a in action()) {
        prop_assert_eq!(a.kind() == ActionKind::Combination, matches!(a, Action::BoxInput { .. }));
    }
}

#[test]
fn kinds_follow_the_action_table() {
    let system = ["Open_App()", "Close_App()", "Failed()", "Finish()"];
    for s in system {
        assert_eq!(parse_action_call(s).unwrap().kind(), ActionKind::System, "{s}");
    }
    for s in ["Click(1)", "Type(\"a\")", "Back()", "Swipe(\"up\", \"short\")", "Long_Press(2)"] {
        assert_eq!(parse_action_call(s).unwrap().kind(), ActionKind::Single, "{s}");
    }
}
