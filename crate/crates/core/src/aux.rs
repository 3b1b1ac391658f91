//! Auxiliary attribute generation: prompt rendering, transcript parsing,
//! the regenerate-on-echo rule, and the in-memory cache.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::vocab::{fold, Composition};

/// Anything that can complete a text prompt.
pub trait TextProvider {
    fn complete(&self, prompt: &str) -> core::result::Result<String, String>;
}

const NUMBER_WORDS: [&str; 11] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];

fn count_word(t: usize) -> String {
    match NUMBER_WORDS.get(t) {
        Some(w) if t >= 1 => (*w).to_string(),
        _ => format!("{t}"),
    }
}

/// The fixed generation prompt; counts up to ten are spelled out.
pub fn render_prompt(comp: &Composition, t: usize) -> String {
    format!(
        "Please give me {} adjectives that can describe the visual feature of a photo of a/an {} {} well.",
        count_word(t),
        comp.attribute,
        comp.object
    )
}

/// Matches `^\s*\d+[.)]\s*(.+)$` and returns the captured item.
fn numbered_item(line: &str) -> Option<&str> {
    let rest = line.trim_start();
    let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = &rest[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    let item = rest.trim_start();
    if item.is_empty() {
        None
    } else {
        Some(item)
    }
}

fn strip_suffix_word<'s>(item: &'s str, suffix: &str) -> &'s str {
    let folded = item.to_lowercase();
    let suffix = suffix.to_lowercase();
    if folded.len() > suffix.len() && folded.ends_with(&suffix) {
        let cut = item.len() - suffix.len();
        if item[..cut].ends_with(char::is_whitespace) {
            return item[..cut].trim_end();
        }
    }
    item
}

fn clean_item(raw: &str, comp: Option<&Composition>) -> String {
    let mut item = raw.trim();
    // "Lush: full of plants" / "Lush - full of plants"
    for sep in [":", " - ", " – ", " — "] {
        if let Some(pos) = item.find(sep) {
            item = &item[..pos];
        }
    }
    let mut item = item.trim_matches(|c: char| c == '*' || c == '"' || c == '\'' || c.is_whitespace());
    item = item.trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
    if let Some(c) = comp {
        let full = format!("{} {}", c.attribute, c.object);
        let stripped = strip_suffix_word(item, &full);
        item = if stripped.len() != item.len() { stripped } else { strip_suffix_word(item, &c.object) };
    }
    item.trim().to_lowercase()
}

/// Extracts up to `t` distinct lowercase adjectives from a numbered-list
/// transcript, dropping trailing punctuation and echoes of the object noun.
pub fn parse_transcript(raw: &str, t: usize, comp: Option<&Composition>) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::with_capacity(t);
    let mut seen = BTreeSet::new();
    for line in raw.lines() {
        if out.len() == t {
            break;
        }
        let Some(item) = numbered_item(line) else { continue };
        let item = clean_item(item, comp);
        if item.is_empty() || (comp.is_some_and(|c| fold(&item) == fold(&c.object))) {
            continue;
        }
        if seen.insert(item.clone()) {
            out.push(item);
        }
    }
    if out.len() < t {
        return Err(Error::Parse { expected: t, found: out.len(), transcript: raw.to_string() });
    }
    Ok(out)
}

/// Checks the cache-entry invariants for `comp`.
pub fn validate_entry(comp: &Composition, words: &[String], t: usize) -> Result<()> {
    if words.len() != t {
        return Err(Error::Config(format!("\"{comp}\" has {} auxiliary attributes, expected {t}", words.len())));
    }
    let mut seen = BTreeSet::new();
    for w in words {
        if w.is_empty() || *w != w.to_lowercase() {
            return Err(Error::Config(format!("auxiliary attribute {w:?} for \"{comp}\" must be non-empty lowercase")));
        }
        if fold(w) == fold(&comp.attribute) {
            return Err(Error::AuxRepeatsAttribute {
                attribute: comp.attribute.clone(),
                object: comp.object.clone(),
                word: w.clone(),
            });
        }
        if !seen.insert(w.as_str()) {
            return Err(Error::Config(format!("duplicate auxiliary attribute {w:?} for \"{comp}\"")));
        }
    }
    Ok(())
}

/// Result of one successful generation.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub words: Vec<String>,
    /// Every raw reply, in call order.
    pub transcript: String,
    pub calls: usize,
}

/// Asks `provider` for `t` adjectives. If the reply repeats the composition's
/// own attribute, asks again for `t + 1` and keeps `t` that differ from it.
/// Provider and parse failures are retried; `max_retries` bounds the number
/// of calls after the first.
pub fn generate_aux(provider: &dyn TextProvider, comp: &Composition, t: usize, max_retries: usize) -> Result<Generated> {
    if t == 0 {
        return Err(Error::Config("auxiliary count must be at least 1".into()));
    }
    let attr = fold(&comp.attribute);
    let mut transcript = String::new();
    let mut ask = t;
    let mut last_error = String::new();
    for attempt in 0..=max_retries {
        let prompt = render_prompt(comp, ask);
        let reply = match provider.complete(&prompt) {
            Ok(r) => r,
            Err(e) => {
                last_error = e;
                continue;
            }
        };
        if !transcript.is_empty() {
            transcript.push_str("\n---\n");
        }
        transcript.push_str(&reply);
        let words = match parse_transcript(&reply, ask, Some(comp)) {
            Ok(w) => w,
            Err(e) => {
                last_error = e.to_string();
                continue;
            }
        };
        let kept: Vec<String> = words.iter().filter(|w| fold(w) != attr).cloned().collect();
        if kept.len() == words.len() && ask == t {
            return Ok(Generated { words: kept, transcript, calls: attempt + 1 });
        }
        if ask > t && kept.len() >= t {
            return Ok(Generated { words: kept.into_iter().take(t).collect(), transcript, calls: attempt + 1 });
        }
        last_error = format!("reply repeated the attribute {:?}", comp.attribute);
        ask = t + 1;
    }
    Err(Error::Generation { composition: comp.key(), attempts: max_retries + 1, last_error })
}

/// Composition → adjectives, with the raw transcripts kept alongside.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuxCache {
    pub entries: BTreeMap<Composition, Vec<String>>,
    pub provenance: BTreeMap<Composition, String>,
}

impl AuxCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, comp: &Composition) -> Option<&[String]> {
        self.entries.get(comp).map(Vec::as_slice)
    }

    pub fn insert(&mut self, comp: Composition, words: Vec<String>, t: usize) -> Result<()> {
        validate_entry(&comp, &words, t)?;
        self.entries.insert(comp, words);
        Ok(())
    }

    /// Cached entry, or a fresh generation when a provider is available.
    pub fn get_or_generate(
        &mut self,
        provider: Option<&dyn TextProvider>,
        comp: &Composition,
        t: usize,
        max_retries: usize,
    ) -> Result<Vec<String>> {
        if let Some(words) = self.entries.get(comp) {
            return Ok(words.clone());
        }
        let provider = provider.ok_or_else(|| Error::CacheMiss(comp.key()))?;
        let generated = generate_aux(provider, comp, t, max_retries)?;
        self.insert(comp.clone(), generated.words.clone(), t)?;
        self.provenance.insert(comp.clone(), generated.transcript);
        Ok(generated.words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use core::cell::RefCell;

    struct Scripted {
        replies: RefCell<Vec<String>>,
        prompts: RefCell<Vec<String>>,
    }

    impl Scripted {
        fn new(replies: &[&str]) -> Self {
            Self {
                replies: RefCell::new(replies.iter().rev().map(|s| s.to_string()).collect()),
                prompts: RefCell::new(Vec::new()),
            }
        }
    }

    impl TextProvider for Scripted {
        fn complete(&self, prompt: &str) -> core::result::Result<String, String> {
            self.prompts.borrow_mut().push(prompt.to_string());
            self.replies.borrow_mut().pop().ok_or_else(|| "exhausted".to_string())
        }
    }

    #[test]
    fn prompt_template() {
        assert_eq!(
            render_prompt(&Composition::new("browned", "beef"), 5),
            "Please give me five adjectives that can describe the visual feature of a photo of a/an browned beef well."
        );
        assert!(render_prompt(&Composition::new("ripe", "apple"), 1).contains("give me one adjectives"));
        assert!(render_prompt(&Composition::new("inflated", "pool"), 5).contains("inflated pool"));
        assert!(render_prompt(&Composition::new("old", "car"), 12).contains("give me 12 adjectives"));
    }

    #[test]
    fn parses_numbered_lists() {
        let raw = "1. Juicy\n2. Glistening\n3. Crispy\n4. Sizzling\n5. Mouthwatering";
        assert_eq!(parse_transcript(raw, 3, None).unwrap(), ["juicy", "glistening", "crispy"]);
        let echo = "1. Juicy beef\n2. Tender beef\n3. Flavorful beef";
        let comp = Composition::new("browned", "beef");
        assert_eq!(parse_transcript(echo, 3, Some(&comp)).unwrap(), ["juicy", "tender", "flavorful"]);
        let comp = Composition::new("inflated", "pool");
        let echo = "1. Refreshing inflated pool\n2) Blue inflated pool.\n3. Large inflated pool";
        assert_eq!(parse_transcript(echo, 3, Some(&comp)).unwrap(), ["refreshing", "blue", "large"]);
    }

    #[test]
    fn parse_failures() {
        assert!(matches!(parse_transcript("no list here", 3, None), Err(Error::Parse { found: 0, .. })));
        assert!(matches!(parse_transcript("1. a\n2. a\n3. A.", 2, None), Err(Error::Parse { found: 1, .. })));
        assert!(matches!(parse_transcript("1.\n2. ...", 1, None), Err(Error::Parse { .. })));
    }

    #[test]
    fn preamble_and_descriptions_are_ignored() {
        let raw = "Sure! Here are some:\n\n1. **Lush**: full of plants\n2. Vibrant - bright colors\n3. Flourishing!";
        assert_eq!(parse_transcript(raw, 3, None).unwrap(), ["lush", "vibrant", "flourishing"]);
    }

    #[test]
    fn first_reply_accepted_when_clean() {
        let p = Scripted::new(&["1. Lush\n2. Vibrant\n3. Flourishing"]);
        let g = generate_aux(&p, &Composition::new("large", "garden"), 3, 4).unwrap();
        assert_eq!(g.words, ["lush", "vibrant", "flourishing"]);
        assert_eq!(g.calls, 1);
    }

    #[test]
    fn echoed_attribute_triggers_t_plus_one_request() {
        let p = Scripted::new(&["1. Ancient\n2. Majestic\n3. Weathered", "1. Majestic\n2. Ancient\n3. Weathered\n4. Historic"]);
        let comp = Composition::new("ancient", "building");
        let g = generate_aux(&p, &comp, 3, 4).unwrap();
        assert_eq!(g.words, ["majestic", "weathered", "historic"]);
        let prompts = p.prompts.borrow();
        assert_eq!(prompts.len(), 2);
        assert!(prompts[1].contains("give me four adjectives"));
    }

    #[test]
    fn exhausted_retries_is_a_generation_error() {
        let p = Scripted::new(&["1. Ancient\n2. Old\n3. Grand", "nonsense"]);
        let err = generate_aux(&p, &Composition::new("ancient", "building"), 3, 1).unwrap_err();
        assert!(matches!(err, Error::Generation { attempts: 2, .. }));
    }

    #[test]
    fn cache_hit_skips_the_provider() {
        let p = Scripted::new(&["1. Lush\n2. Vibrant\n3. Flourishing"]);
        let comp = Composition::new("large", "garden");
        let mut cache = AuxCache::new();
        cache.get_or_generate(Some(&p), &comp, 3, 2).unwrap();
        let again = cache.get_or_generate(Some(&p), &comp, 3, 2).unwrap();
        assert_eq!(again, vec!["lush", "vibrant", "flourishing"]);
        assert_eq!(p.prompts.borrow().len(), 1);
        let other = Composition::new("small", "garden");
        assert!(matches!(cache.get_or_generate(None, &other, 3, 2), Err(Error::CacheMiss(_))));
    }

    #[test]
    fn entry_validation() {
        let comp = Composition::new("old", "car");
        let w = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(validate_entry(&comp, &w(&["rusty", "dusty"]), 2).is_ok());
        assert!(validate_entry(&comp, &w(&["rusty", "Dusty"]), 2).is_err());
        assert!(validate_entry(&comp, &w(&["rusty", "rusty"]), 2).is_err());
        assert!(validate_entry(&comp, &w(&["rusty", "old"]), 2).is_err());
        assert!(validate_entry(&comp, &w(&["rusty"]), 2).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn parser_never_overshoots_or_emits_empty(raw in "(([0-9]{1,2}[.)] ?[A-Za-z ,.!]{0,12})?\n){0,8}", t in 1usize..5) {
                if let Ok(items) = parse_transcript(&raw, t, Some(&Composition::new("red", "car"))) {
                    prop_assert!(items.len() <= t);
                    prop_assert!(items.iter().all(|i| !i.is_empty()));
                }
            }
        }
    }
}
