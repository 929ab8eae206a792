use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sanitizer::{SegmentRole, UserRequest};

pub const DEFAULT_TEMPLATE: &str = "a {target} is {class}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetPrompt {
    pub role: SegmentRole,
    /// Index into the request's label classes; `None` for class-free detection prompts.
    pub class_index: Option<u32>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub targets: Vec<TargetPrompt>,
    pub background: String,
}

impl PromptSet {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.targets.iter().map(|p| p.text.as_str())
    }
}

fn render(template: &str, target: &str, class: &str) -> String {
    template.replace("{target}", target).replace("{class}", class)
}

/// One prompt per (target, class) pair, targets outermost. Without label
/// classes each target gets the bare prompt `a {target}`.
pub fn build_prompts(request: &UserRequest) -> Result<PromptSet> {
    request.validate()?;
    let template = request.prompt_template.as_deref().unwrap_or(DEFAULT_TEMPLATE);
    let mut targets = Vec::new();
    for (ti, target) in request.target_objects.iter().enumerate() {
        let role = SegmentRole::Target(ti as u16);
        if request.label_classes.is_empty() {
            targets.push(TargetPrompt {
                role,
                class_index: None,
                text: alloc::format!("a {target}"),
            });
        }
        for (ci, class) in request.label_classes.iter().enumerate() {
            targets.push(TargetPrompt {
                role,
                class_index: Some(ci as u32),
                text: render(template, target, class),
            });
        }
    }
    Ok(PromptSet {
        targets,
        background: request.background.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sanitizer::TaskKind;
    use crate::testutil::husky_request;
    use alloc::vec;

    #[test]
    fn husky_prompts() {
        let p = build_prompts(&husky_request()).unwrap();
        let texts: Vec<_> = p.texts().collect();
        assert_eq!(
            texts,
            ["a dog is eating", "a dog is sitting", "a dog is sleeping", "a dog is playing"]
        );
        assert_eq!(p.background, "bedroom");
        assert!(p.targets.iter().all(|t| t.role == SegmentRole::Target(0)));
    }

    #[test]
    fn detection_without_classes() {
        let req = UserRequest {
            target_objects: vec!["pill bottle".into()],
            background: "table".into(),
            training_objective: "find pill bottles".into(),
            label_classes: vec![],
            task_kind: TaskKind::Detection,
            prompt_template: None,
        };
        let p = build_prompts(&req).unwrap();
        assert_eq!(p.texts().collect::<Vec<_>>(), ["a pill bottle"]);
        assert_eq!(p.targets[0].class_index, None);
    }

    #[test]
    fn cartesian_product_is_role_tagged() {
        let mut req = husky_request();
        req.target_objects = vec!["dog".into(), "cat".into()];
        req.label_classes = vec!["eating".into(), "sitting".into(), "sleeping".into()];
        let p = build_prompts(&req).unwrap();
        assert_eq!(p.targets.len(), 6);
        assert_eq!(p.targets[3].text, "a cat is eating");
        assert_eq!(p.targets[3].role, SegmentRole::Target(1));
        assert_eq!(p.targets[5].class_index, Some(2));
    }

    #[test]
    fn custom_template() {
        let mut req = husky_request();
        req.prompt_template = Some("a photo of a {target} {class}".into());
        let p = build_prompts(&req).unwrap();
        assert_eq!(p.targets[0].text, "a photo of a dog eating");
    }
}
