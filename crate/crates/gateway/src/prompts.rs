//! Prompt templates.

use editdiff_core::parser::serialize_difference;
use editdiff_core::Difference;

/// System prompt for difference detection. No user text accompanies it; the
/// user turn carries only the original and edited images.
pub const DIFFERENCE_SYSTEM_PROMPT: &str = "You are a system that detects differences between two images.

- Extract the elements that are changed in the second image with respect to the first one.
- Create a new entry for each distinct change.
- For each entry, use the following format:
\"<CHANGE_COMMAND>: <CHANGED_ELEMENT>, (<BOUNDING_BOX>)\"

CHANGE_COMMAND:
- ADD: If a new element appears in the second image that was not present in the first.
- REMOVE: If an element from the first image is missing in the second.
- EDIT: If an element in the second image is different but in the same location as an element in the first image.

CHANGED_ELEMENT: Describe the element that has changed.

BOUNDING_BOX: Use normalized coordinates [x0, y0, x1, y1] for the changed element position in the second image, where (x0, y0) is the top-left corner, and (x1, y1) is the bottom-right corner. The coordinates should be scaled between 0 and 1, with 0 representing one edge of the image and 1 representing the opposite edge.";

pub const COHERENCE_SYSTEM_PROMPT: &str = "You are evaluating if a specific change detected by an AI vision model matches the request in the original edit prompt.

## Task
Determine if the detected change, as described and bounded by the provided colored bbox, matches the request in the original edit prompt.
A match is valid only if the localized detected change is 100% compatible with the requested prompt.
Any unwanted modification of the original image (even small) should avoid a match.

## Context
- The original image and the edited image are provided, in this order. The edited image is
the original with some changes applied. Focus only on the area specified by the bbox in the detected change.
- Another AI model has detected a change in the image, including its bbox.
    - ADD: An object is only added in the edited image (on the background).
    - EDIT: An object is substituted with another one in the edited image.
    - REMOVE: An object is removed in the edited image.
- Be strict: An EDIT means that an object has been removed and substituted with another one,
ensure nothing was removed unless explicitly stated in the prompt. If an object has been removed unexpectedly, then you should say NO.

## Example Response
- Reasoning: <REASONING>
- Decision: \"YES\" or \"NO\"";

pub const COHERENCE_USER_TEMPLATE: &str = "## Instructions
1. The original edit prompt is: {SUBSTITUTE_PROMPT}
2. The detected change to evaluate is: {SUBSTITUTE_CHANGE}
3. Use only the text and the observations from the specified bbox area (colored) in both the
original and edited images to decide if the specific detected change aligns with the original edit prompt.";

pub const CAPTION_TEMPLATE_VERSION: &str = "caption-v1";

pub const CAPTION_SYSTEM_PROMPT: &str = "You write short, literal captions of photographs.";

pub const CAPTION_USER_PROMPT: &str =
    "Describe this image in one sentence. Name every salient object with its color and position.";

pub const COMPOSE_TEMPLATE_VERSION: &str = "compose-v1";

pub const COMPOSE_SYSTEM_PROMPT: &str =
    "You rewrite image captions so that they describe the image after a requested edit.";

pub const COMPOSE_USER_TEMPLATE: &str = "Original caption: {CAPTION}
Edit instruction: {PROMPT}
Write one sentence describing the image after the edit has been applied. Reply with the caption only.";

pub fn coherence_user_prompt(edit_prompt: &str, change: &Difference) -> String {
    // the change is filled first so that braces in the edit prompt stay literal
    COHERENCE_USER_TEMPLATE
        .replace("{SUBSTITUTE_CHANGE}", &serialize_difference(change))
        .replace("{SUBSTITUTE_PROMPT}", edit_prompt)
}

pub fn compose_user_prompt(original_caption: &str, edit_prompt: &str) -> String {
    COMPOSE_USER_TEMPLATE
        .replace("{PROMPT}", edit_prompt)
        .replace("{CAPTION}", original_caption)
}

#[cfg(test)]
mod tests {
    use super::*;
    use editdiff_core::{EditCommand, NormalizedBBox};

    #[test]
    fn coherence_substitution() {
        let d = Difference::new(
            EditCommand::Edit,
            "rose",
            NormalizedBBox::new(0.1, 0.2, 0.3, 0.4).unwrap(),
            1.0,
        )
        .unwrap();
        let p = coherence_user_prompt("make the rose {blue}", &d);
        assert!(p.contains("1. The original edit prompt is: make the rose {blue}"));
        assert!(p.contains("2. The detected change to evaluate is: EDIT: rose, [0.10, 0.20, 0.30, 0.40]"));
        assert!(!p.contains("SUBSTITUTE"));
    }

    #[test]
    fn compose_substitution() {
        let p = compose_user_prompt("a red car", "paint it {PROMPT}");
        assert!(p.starts_with("Original caption: a red car\nEdit instruction: paint it {PROMPT}\n"));
    }

    #[test]
    fn detection_prompt_lists_all_commands() {
        for c in ["- ADD:", "- REMOVE:", "- EDIT:"] {
            assert!(DIFFERENCE_SYSTEM_PROMPT.contains(c));
        }
    }
}
