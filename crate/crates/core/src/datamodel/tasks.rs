use serde::{Deserialize, Serialize};

use super::ModalityTag;
use crate::error::{Error, Result};

/// Where the reference sample comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    GroundTruthTarget,
    RandomTargetSample,
    None,
}

/// Which outputs a task can produce at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferenceOutputs {
    /// Reference-conditioned output `T_enc`.
    pub encoded: bool,
    /// Prior-sampled output `T_sam`.
    pub sampled: bool,
}

/// Synthetic corpus backing a task, and how its pairs are oriented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Silhouette to styled shape.
    Shapes,
    /// Caption to styled shape.
    Captions,
    /// Styled shape to caption.
    CaptionsReversed,
    /// Caption to caption in a second token space.
    CaptionsTranslated,
    /// Content tokens to styled frames.
    Sequences,
    /// Styled frames to content tokens.
    SequencesReversed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub name: &'static str,
    pub source: ModalityTag,
    pub target: ModalityTag,
    pub train_reference: ReferencePolicy,
    pub test_reference: ReferencePolicy,
    pub inference: InferenceOutputs,
    pub data: DataKind,
    /// Alternative spellings accepted by [`find_task`].
    pub aliases: &'static [&'static str],
}

impl TaskSpec {
    /// Short identifier safe for file names and parameter prefixes.
    pub fn slug(&self) -> &'static str {
        self.aliases.first().copied().unwrap_or(self.name)
    }
}

const fn task(
    name: &'static str,
    aliases: &'static [&'static str],
    source: ModalityTag,
    target: ModalityTag,
    test_reference: ReferencePolicy,
    encoded: bool,
    data: DataKind,
) -> TaskSpec {
    TaskSpec {
        name,
        source,
        target,
        train_reference: ReferencePolicy::GroundTruthTarget,
        test_reference,
        inference: InferenceOutputs {
            encoded,
            sampled: true,
        },
        data,
        aliases,
    }
}

/// The six published tasks followed by the synthetic desk tasks.
pub fn task_registry() -> Vec<TaskSpec> {
    use DataKind::*;
    use ModalityTag::*;
    use ReferencePolicy::{None as NoRef, RandomTargetSample as Random};
    vec![
        task("image→image", &["image2image", "image->image"], Image, Image, Random, true, Shapes),
        task("text→image", &["text2image", "text->image"], Text, Image, NoRef, false, Captions),
        task("image→text", &["image2text", "image->text"], Image, Text, NoRef, false, CaptionsReversed),
        task("text→speech", &["text2speech", "text->speech"], Text, Sequence, Random, true, Sequences),
        task("speech→text", &["speech2text", "speech->text"], Sequence, Text, NoRef, false, SequencesReversed),
        task("text→text", &["text2text", "text->text"], Text, Text, NoRef, false, CaptionsTranslated),
        task("shapes", &["colored-shapes"], Image, Image, Random, true, Shapes),
        task("captions", &["toy-captions"], Text, Image, NoRef, false, Captions),
        task("sequences", &["sequence-styles"], Text, Sequence, Random, true, Sequences),
    ]
}

pub fn find_task(name: &str) -> Result<TaskSpec> {
    task_registry()
        .into_iter()
        .find(|t| t.name == name || t.aliases.contains(&name))
        .ok_or_else(|| Error::UnknownTask(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_reference_means_no_encoded_output() {
        for t in task_registry() {
            if t.test_reference == ReferencePolicy::None {
                assert!(!t.inference.encoded, "{}", t.name);
            }
            assert_eq!(t.train_reference, ReferencePolicy::GroundTruthTarget);
        }
    }

    #[test]
    fn lookup_by_alias_and_unknown() {
        assert_eq!(find_task("image2image").unwrap().name, "image→image");
        assert!(matches!(find_task("audio→video"), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn names_and_slugs_unique() {
        let reg = task_registry();
        let mut names: Vec<_> = reg.iter().map(|t| t.name).collect();
        names.extend(reg.iter().map(|t| t.slug()));
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}
