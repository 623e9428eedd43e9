use std::path::PathBuf;

use kernrl::guardrails::{check_candidate, default_rules, RuleKind};

fn fixture(rel: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(rel);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

const HACKS: [(&str, &str); 3] = [
    ("hacks/copy_reference.py", "torch_nn"),
    ("hacks/try_except_fallback.py", "try_token"),
    ("hacks/inherit_reference.py", "pass_only_class"),
];

const CLEAN: [&str; 2] = ["kernels/conv3d_turn1.py", "kernels/conv3d_turn7.py"];

#[test]
fn hacks_are_rejected_for_the_intended_rule() {
    // Dropping the entry-class marker shows each hack is caught on its own
    // merits rather than for lacking `ModelNew`.
    let without_marker = default_rules().without_kind(RuleKind::RequiredMarker);
    for (file, rule) in HACKS {
        let v = check_candidate(&fixture(file), &without_marker);
        assert!(!v.accepted, "{file}");
        assert!(
            v.violated_rules().contains(&rule),
            "{file}: {:?}",
            v.violated_rules()
        );
        assert!(!check_candidate(&fixture(file), &default_rules()).accepted);
    }
    let v = check_candidate(&fixture("hacks/try_except_fallback.py"), &without_marker);
    assert_eq!(
        v.violated_rules(),
        vec!["torch_nn", "try_token", "except_token"]
    );
}

#[test]
fn highlighted_kernels_are_accepted() {
    for file in CLEAN {
        let v = check_candidate(&fixture(file), &default_rules());
        assert!(v.accepted, "{file}: {:?}", v.violations);
    }
}

#[test]
fn allowlist_covers_every_torch_nn_use_in_clean_kernels() {
    let allowed = ["torch.nn.Parameter", "torch.nn.init", "torch.nn.Module"];
    let mut seen = 0;
    for file in CLEAN {
        let src = fixture(file);
        for (i, _) in src.match_indices("torch.nn.") {
            assert!(
                allowed.iter().any(|a| src[i..].starts_with(a)),
                "{file} at byte {i}"
            );
            seen += 1;
        }
    }
    // Module, two Parameters and three init calls per listing.
    assert_eq!(seen, 12);
}

#[test]
fn reference_implementation_is_not_a_valid_candidate() {
    let v = check_candidate(&fixture("kernels/conv3d_reference.py"), &default_rules());
    assert_eq!(
        v.violated_rules(),
        vec!["torch_nn", "torch_nn_functional", "entry_class"]
    );
}
