//! Object and action extraction from prompt text.

use serde::{Deserialize, Serialize};

use super::DataprepError;
use crate::tokenizer::{encode_words, normalize_words, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PosTag {
    Noun,
    Verb,
    Adj,
    Det,
    Adp,
    Adv,
    Other,
}

/// Part-of-speech tagger over normalized words.
pub trait PosTagger: Send + Sync {
    fn name(&self) -> &str;

    /// One tag per word. An `Err` is a tagger failure for this prompt only.
    fn tag(&self, words: &[String]) -> Result<Vec<PosTag>, String>;
}

const VERBS: &[&str] = &[
    "place", "put", "move", "push", "pull", "pick", "lift", "open", "close", "turn", "slide",
    "switch", "take", "drop", "stack", "unstack", "wipe", "fold", "unfold", "pour", "grasp",
    "grab", "rotate", "flip", "insert", "remove", "throw", "hold", "cover", "uncover", "tilt",
    "squeeze", "spin", "hang", "plug", "unplug", "press", "knock", "drag", "sweep", "lay",
    "twist", "shake", "poke", "tear", "roll", "bring", "carry", "hit", "touch", "reach",
];

const ADJECTIVES: &[&str] = &[
    "red", "green", "blue", "yellow", "orange", "purple", "pink", "cyan", "magenta", "black",
    "white", "gray", "grey", "brown", "small", "large", "big", "little", "tiny", "tall", "short",
    "empty", "full", "wooden", "metal", "plastic", "dirty", "clean", "new",
    "old", "dark",
];

/// Spatial words: modifiers before a noun ("left door"), otherwise relations
/// ("to the left of") that name no object.
const SPATIAL: &[&str] = &[
    "left", "right", "top", "bottom", "front", "back", "middle", "center", "side", "upper",
    "lower",
];

const DETERMINERS: &[&str] = &[
    "the", "a", "an", "this", "that", "these", "those", "some", "each", "every", "its", "their",
    "his", "her", "my", "your", "another",
];

const ADPOSITIONS: &[&str] = &[
    "to", "of", "in", "on", "into", "onto", "from", "with", "at", "by", "over", "under", "near",
    "behind", "beside", "off", "up", "down", "out", "away", "toward", "towards", "across",
    "through", "inside", "next", "above", "below", "between", "along", "around", "against",
];

const ADVERBS: &[&str] = &["then", "again", "slightly", "gently", "quickly", "slowly", "back"];

const OTHER: &[&str] = &["and", "or", "but", "it", "them", "so", "until", "while"];

/// Lexicon-and-rule tagger. Unknown alphabetic words are nouns.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleTagger;

impl PosTagger for RuleTagger {
    fn name(&self) -> &str {
        "rule-lexicon-v1"
    }

    fn tag(&self, words: &[String]) -> Result<Vec<PosTag>, String> {
        let base: Vec<PosTag> = words.iter().map(|w| lexical_tag(w)).collect();
        let mut tags = base.clone();
        for i in 0..words.len() {
            if SPATIAL.contains(&words[i].as_str()) {
                let next_is_noun = matches!(base.get(i + 1), Some(PosTag::Noun));
                tags[i] = if next_is_noun { PosTag::Adj } else { PosTag::Adv };
            }
        }
        Ok(tags)
    }
}

fn lexical_tag(word: &str) -> PosTag {
    let has = |list: &[&str]| list.contains(&word);
    if has(VERBS) {
        PosTag::Verb
    } else if has(DETERMINERS) {
        PosTag::Det
    } else if has(ADPOSITIONS) {
        PosTag::Adp
    } else if has(ADJECTIVES) {
        PosTag::Adj
    } else if has(SPATIAL) {
        PosTag::Adv
    } else if has(ADVERBS) {
        PosTag::Adv
    } else if has(OTHER) || !word.chars().any(char::is_alphabetic) {
        PosTag::Other
    } else {
        PosTag::Noun
    }
}

impl std::str::FromStr for PosTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "noun" => PosTag::Noun,
            "verb" => PosTag::Verb,
            "adj" => PosTag::Adj,
            "det" => PosTag::Det,
            "adp" => PosTag::Adp,
            "adv" => PosTag::Adv,
            "other" => PosTag::Other,
            other => return Err(format!("unknown tag {other:?}")),
        })
    }
}

/// Delegates to an external program: `<program> <word>...` must print one
/// tag (noun, verb, adj, det, adp, adv, other) per line, one per word.
#[derive(Debug, Clone)]
pub struct ExternalTagger {
    pub program: String,
}

impl PosTagger for ExternalTagger {
    fn name(&self) -> &str {
        &self.program
    }

    fn tag(&self, words: &[String]) -> Result<Vec<PosTag>, String> {
        let out = std::process::Command::new(&self.program)
            .args(words)
            .output()
            .map_err(|e| format!("{}: {e}", self.program))?;
        if !out.status.success() {
            return Err(format!("{} exited with {}", self.program, out.status));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let tags = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<PosTag>, _>>()?;
        if tags.len() != words.len() {
            return Err(format!("{} tags for {} words", tags.len(), words.len()));
        }
        Ok(tags)
    }
}

/// Prompt text with its tokenization and extracted queries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptAnnotation {
    pub prompt: String,
    pub tokens: Vec<u32>,
    pub objects: Vec<String>,
    pub actions: Vec<String>,
    /// 1 at every token position belonging to an action verb.
    pub action_token_mask: Vec<u8>,
}

impl PromptAnnotation {
    pub fn mask_bools(&self) -> Vec<bool> {
        self.action_token_mask.iter().map(|&m| m != 0).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.action_token_mask.iter().filter(|&&m| m != 0).count()
    }
}

/// Splits a prompt into noun phrases (objects) and verbs (actions) and marks
/// the verb token positions.
pub fn extract_queries(
    prompt: &str,
    tagger: &dyn PosTagger,
    tokenizer: &dyn Tokenizer,
) -> Result<PromptAnnotation, DataprepError> {
    let words = normalize_words(prompt);
    if words.is_empty() {
        return Err(DataprepError::EmptyPrompt);
    }
    let tags = tagger.tag(&words).map_err(DataprepError::TaggerFailure)?;
    if tags.len() != words.len() {
        return Err(DataprepError::TaggerFailure(format!(
            "{} tags for {} words",
            tags.len(),
            words.len()
        )));
    }

    let mut objects = Vec::new();
    let mut actions: Vec<String> = Vec::new();
    let mut phrase: Vec<&str> = Vec::new();
    let mut phrase_has_noun = false;
    let flush = |phrase: &mut Vec<&str>, has_noun: &mut bool, objects: &mut Vec<String>| {
        if *has_noun {
            let text = phrase.join(" ");
            if !objects.contains(&text) {
                objects.push(text);
            }
        }
        phrase.clear();
        *has_noun = false;
    };
    for (w, tag) in words.iter().zip(&tags) {
        match tag {
            PosTag::Adj => {
                if phrase_has_noun {
                    flush(&mut phrase, &mut phrase_has_noun, &mut objects);
                }
                phrase.push(w);
            }
            PosTag::Noun => {
                phrase.push(w);
                phrase_has_noun = true;
            }
            other => {
                flush(&mut phrase, &mut phrase_has_noun, &mut objects);
                if *other == PosTag::Verb && !actions.contains(w) {
                    actions.push(w.clone());
                }
            }
        }
    }
    flush(&mut phrase, &mut phrase_has_noun, &mut objects);

    let (tokens, owners) = encode_words(tokenizer, &words);
    let action_token_mask = owners
        .iter()
        .map(|o| match o {
            Some(wi) => u8::from(tags[*wi] == PosTag::Verb),
            None => 0,
        })
        .collect();

    Ok(PromptAnnotation {
        prompt: prompt.trim().to_string(),
        tokens,
        objects,
        actions,
        action_token_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::HashTokenizer;

    fn run(prompt: &str) -> PromptAnnotation {
        extract_queries(prompt, &RuleTagger, &HashTokenizer::new(1024, 32)).unwrap()
    }

    #[test]
    fn towel_and_blue_fork() {
        let a = run("Place towel to the left of the blue fork");
        assert_eq!(a.objects, vec!["towel", "blue fork"]);
        assert_eq!(a.actions, vec!["place"]);
        // BOS, place, towel, ...
        assert_eq!(a.action_token_mask[..3], [0, 1, 0]);
        assert_eq!(a.masked_count(), 1);
    }

    #[test]
    fn open_microwave() {
        let a = run("Open Microwave");
        assert_eq!(a.objects, vec!["microwave"]);
        assert_eq!(a.actions, vec!["open"]);
        assert_eq!(a.action_token_mask, vec![0, 1, 0, 0]);
    }

    #[test]
    fn noun_phrase_without_verb_has_empty_mask() {
        let a = run("the red block");
        assert_eq!(a.objects, vec!["red block"]);
        assert!(a.actions.is_empty());
        assert!(a.action_token_mask.iter().all(|&m| m == 0));
        assert_eq!(a.action_token_mask.len(), a.tokens.len());
    }

    #[test]
    fn spatial_modifier_kept_before_noun() {
        let a = run("Open left door");
        assert_eq!(a.objects, vec!["left door"]);
    }

    #[test]
    fn synthetic_prompt_shape() {
        let a = run("move red square to green bowl");
        assert_eq!(a.objects, vec!["red square", "green bowl"]);
        assert_eq!(a.actions, vec!["move"]);
    }

    #[test]
    fn blank_prompt_is_rejected() {
        let err = extract_queries("   ", &RuleTagger, &HashTokenizer::new(64, 8)).unwrap_err();
        assert!(matches!(err, DataprepError::EmptyPrompt));
    }

    struct Broken;
    impl PosTagger for Broken {
        fn name(&self) -> &str {
            "broken"
        }
        fn tag(&self, _: &[String]) -> Result<Vec<PosTag>, String> {
            Err("model unavailable".into())
        }
    }

    #[test]
    fn tagger_error_is_reported() {
        let err = extract_queries("open door", &Broken, &HashTokenizer::new(64, 8)).unwrap_err();
        assert!(matches!(err, DataprepError::TaggerFailure(_)));
    }
}
