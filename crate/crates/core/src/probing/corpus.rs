//! Prompt corpora for probing: class words rendered into fixed templates,
//! one prompt per (class, seed) or (class, object, seed).

use serde::{Deserialize, Serialize};

use crate::backend::text::TextEncoder;
use crate::error::{Error, Result};

pub const COLORS: [&str; 10] = [
    "red", "blue", "green", "yellow", "brown", "pink", "purple", "black", "white", "orange",
];

pub const ANIMALS: [&str; 10] = [
    "dog", "giraffe", "horse", "lion", "rabbit", "sheep", "cat", "monkey", "leopard", "tiger",
];

pub const OBJECTS: [&str; 100] = [
    "apple", "banana", "carrot", "dog", "flower", "giraffe", "hat", "car", "train", "bicycle",
    "chair", "table", "lamp", "clock", "book", "bottle", "umbrella", "backpack", "guitar", "piano",
    "kite", "boat", "airplane", "bus", "truck", "motorcycle", "bench", "vase", "teapot", "kettle",
    "spoon", "fork", "knife", "plate", "bowl", "pillow", "blanket", "sofa", "bed", "door",
    "window", "mirror", "candle", "balloon", "basket", "bucket", "ladder", "shoe", "sock", "scarf",
    "glove", "jacket", "shirt", "dress", "tie", "wallet", "key", "phone", "camera", "laptop",
    "keyboard", "pencil", "ball", "tent",
    "anchor", "brush", "cactus", "drum", "envelope", "fence", "globe", "hammer", "igloo", "jar",
    "yak", "acorn", "bear", "caterpillar", "turtle", "dandelion",
    "elephant", "feather", "grape", "hedgehog", "inchworm", "jackfruit", "kiwi", "lemon", "zebra", "mushroom",
    "otter", "peacock", "rose", "strawberry", "volcano", "watermelon", "xenops", "yucca", "cup", "tulip",
];

/// Templates with one `{}` slot for the color word; each mentions a car.
pub const COMPLEX_TEMPLATES: [&str; 12] = [
    "a photo of a {} car and a dog",
    "a photo of {} car",
    "the painting of a {} car",
    "a painting of a wooden {} car",
    "a picture of a shiny {} car",
    "a sketch of a {} car",
    "a {} car parked on the street",
    "a toy {} car on a table",
    "a close-up photo of a {} car",
    "a cool painting of an old {} car",
    "a man and a {} car",
    "a {} car and a dog",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateFamily {
    /// `a <color> car`
    ColorCar,
    /// `a <color> <object>` over every object
    ColorObject,
    /// `a/an <animal> standing in the park`
    AnimalPark,
    /// the color slot of every complex template
    ComplexColor,
    /// `a <color> car`, probed at the article and the noun as well
    TokenProbe,
}

impl TemplateFamily {
    pub const ALL: [TemplateFamily; 5] = [
        TemplateFamily::ColorCar,
        TemplateFamily::ColorObject,
        TemplateFamily::AnimalPark,
        TemplateFamily::ComplexColor,
        TemplateFamily::TokenProbe,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateFamily::ColorCar => "color_car",
            TemplateFamily::ColorObject => "color_object",
            TemplateFamily::AnimalPark => "animal_park",
            TemplateFamily::ComplexColor => "complex_color",
            TemplateFamily::TokenProbe => "token_probe",
        }
    }

    pub fn classes(&self) -> &'static [&'static str; 10] {
        match self {
            TemplateFamily::AnimalPark => &ANIMALS,
            _ => &COLORS,
        }
    }
}

impl std::str::FromStr for TemplateFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown template family `{s}`")))
    }
}

impl std::fmt::Display for TemplateFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which token's cross-attention column a feature is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    EditWord,
    ArticleA,
    NounCar,
}

impl TokenRole {
    pub const ALL: [TokenRole; 3] = [TokenRole::EditWord, TokenRole::ArticleA, TokenRole::NounCar];

    pub fn as_str(&self) -> &'static str {
        match self {
            TokenRole::EditWord => "edit_word",
            TokenRole::ArticleA => "article_a",
            TokenRole::NounCar => "noun_car",
        }
    }
}

impl std::str::FromStr for TokenRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown token role `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub prompt: String,
    pub label: usize,
    pub seed: u64,
    /// Position of the class word's first subtoken.
    pub target_token_position: usize,
    /// The class word was split into several subtokens.
    pub multi_token: bool,
    pub article_position: Option<usize>,
    pub noun_position: Option<usize>,
}

impl RenderedPrompt {
    pub fn position(&self, role: TokenRole) -> Option<usize> {
        match role {
            TokenRole::EditWord => Some(self.target_token_position),
            TokenRole::ArticleA => self.article_position,
            TokenRole::NounCar => self.noun_position,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCorpus {
    pub template_family: TemplateFamily,
    pub class_labels: Vec<String>,
    pub seeds: Vec<u64>,
    pub rendered_prompts: Vec<RenderedPrompt>,
}

impl PromptCorpus {
    pub fn len(&self) -> usize {
        self.rendered_prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rendered_prompts.is_empty()
    }

    /// Class words that some prompt splits into several subtokens.
    pub fn multi_token_words(&self) -> Vec<String> {
        let mut words: Vec<String> = self
            .rendered_prompts
            .iter()
            .filter(|p| p.multi_token)
            .map(|p| self.class_labels[p.label].clone())
            .collect();
        words.sort();
        words.dedup();
        words
    }
}

fn article(word: &str) -> &'static str {
    match word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Renders `family` for every seed. Prompt order is class-major, then
/// object or template, then seed.
pub fn build_corpus(family: TemplateFamily, seeds: &[u64], text: &TextEncoder) -> Result<PromptCorpus> {
    let classes = family.classes();
    let mut rendered = Vec::new();
    for (label, word) in classes.iter().enumerate() {
        let prompts: Vec<String> = match family {
            TemplateFamily::ColorCar | TemplateFamily::TokenProbe => vec![format!("a {word} car")],
            TemplateFamily::ColorObject => OBJECTS.iter().map(|o| format!("a {word} {o}")).collect(),
            TemplateFamily::AnimalPark => vec![format!("{} {word} standing in the park", article(word))],
            TemplateFamily::ComplexColor => COMPLEX_TEMPLATES.iter().map(|t| t.replace("{}", word)).collect(),
        };
        for prompt in prompts {
            let loc = text.locate(&prompt, word)?.ok_or_else(|| {
                Error::Tokenizer(format!("class word `{word}` not found in tokenized prompt `{prompt}`"))
            })?;
            let after_word = loc.position + loc.subtokens;
            let article_position = text.locate(&prompt, "a")?.map(|l| l.position);
            let noun_position = match text.locate(&prompt, "car")? {
                Some(l) if l.position >= after_word => Some(l.position),
                _ => None,
            };
            for &seed in seeds {
                rendered.push(RenderedPrompt {
                    prompt: prompt.clone(),
                    label,
                    seed,
                    target_token_position: loc.position,
                    multi_token: loc.is_multi_token(),
                    article_position,
                    noun_position,
                });
            }
        }
    }
    Ok(PromptCorpus {
        template_family: family,
        class_labels: classes.iter().map(|s| s.to_string()).collect(),
        seeds: seeds.to_vec(),
        rendered_prompts: rendered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::text::FixtureText;
    use candle_core::Device;

    fn text(window: usize) -> TextEncoder {
        TextEncoder::Fixture(FixtureText::new(0, 512, 8, window, &Device::Cpu).unwrap())
    }

    #[test]
    fn word_lists_are_distinct() {
        let mut objects = OBJECTS.to_vec();
        objects.sort();
        objects.dedup();
        assert_eq!(objects.len(), 100);
        assert!(COMPLEX_TEMPLATES.iter().all(|t| t.matches("{}").count() == 1 && t.contains("car")));
    }

    #[test]
    fn corpus_sizes() {
        let enc = text(16);
        let seeds: Vec<u64> = (0..200).collect();
        let c = build_corpus(TemplateFamily::ColorCar, &seeds, &enc).unwrap();
        assert_eq!(c.len(), 2000);
        assert_eq!(c.class_labels.len(), 10);
        let c = build_corpus(TemplateFamily::ColorObject, &[0, 1], &enc).unwrap();
        assert_eq!(c.len(), 2000);
        let c = build_corpus(TemplateFamily::AnimalPark, &[], &enc).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn token_positions() {
        let enc = text(16);
        let c = build_corpus(TemplateFamily::TokenProbe, &[7], &enc).unwrap();
        let p = &c.rendered_prompts[9];
        assert_eq!(p.prompt, "a orange car");
        assert_eq!((p.article_position, p.target_token_position, p.noun_position), (Some(1), 2, Some(3)));
        let c = build_corpus(TemplateFamily::ComplexColor, &[0], &enc).unwrap();
        let p = c.rendered_prompts.iter().find(|p| p.prompt == "a man and a red car").unwrap();
        assert_eq!((p.target_token_position, p.noun_position), (5, Some(6)));
        let c = build_corpus(TemplateFamily::AnimalPark, &[0], &enc).unwrap();
        assert_eq!(c.rendered_prompts[0].prompt, "a dog standing in the park");
    }

    #[test]
    fn long_templates_name_the_window() {
        let err = build_corpus(TemplateFamily::ComplexColor, &[0], &text(8)).unwrap_err();
        assert!(matches!(err, Error::PromptTooLong { limit: 8, .. }));
    }
}
