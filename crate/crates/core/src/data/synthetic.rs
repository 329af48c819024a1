//! Synthetic persona-dialogue corpus whose gold response depends on the
//! persona only as a set.
//!
//! Every persona sentence fills one attribute category (job, pet, …) from a
//! fixed template. The last context utterance asks about one held category and
//! the gold response restates its value: `what is your pet ?` → `my pet is
//! hamster`. Canonical persona order follows the category table, like a profile
//! form, so a model trained only on canonical inputs can latch onto positions.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DialogueRecord, DialogueSample, Dataset, PersonaSet, Split, Vocabulary};
use crate::error::{Error, Result};

pub struct Category {
    pub name: &'static str,
    pub template: &'static str,
    pub values: [&'static str; 24],
}

pub const CATEGORIES: [Category; 10] = [
    Category {
        name: "color",
        template: "i always wear {} clothes",
        values: [
            "red", "blue", "green", "yellow", "purple", "orange", "pink", "black", "white", "gray", "brown", "teal", "gold", "silver",
            "navy", "maroon", "beige", "violet", "cyan", "magenta", "ivory", "crimson", "indigo", "amber",
        ],
    },
    Category {
        name: "job",
        template: "i work as a {}",
        values: [
            "teacher", "nurse", "doctor", "lawyer", "chef", "farmer", "pilot", "baker", "plumber", "writer", "painter", "dentist",
            "engineer", "mechanic", "pharmacist", "librarian", "carpenter", "electrician", "architect", "accountant", "firefighter",
            "cashier", "barber", "tailor",
        ],
    },
    Category {
        name: "pet",
        template: "i have a pet {}",
        values: [
            "dog", "cat", "hamster", "parrot", "rabbit", "turtle", "goldfish", "snake", "lizard", "ferret", "pony", "goat", "canary",
            "gecko", "hedgehog", "iguana", "mouse", "rat", "frog", "chinchilla", "tortoise", "cockatoo", "piglet", "duck",
        ],
    },
    Category {
        name: "food",
        template: "i love eating {}",
        values: [
            "pizza", "pasta", "sushi", "tacos", "burgers", "salad", "curry", "noodles", "steak", "pancakes", "waffles", "dumplings",
            "soup", "sandwiches", "ramen", "lasagna", "burritos", "nachos", "risotto", "falafel", "kebabs", "omelets", "chili", "gumbo",
        ],
    },
    Category {
        name: "hobby",
        template: "in my spare time i enjoy {}",
        values: [
            "painting", "reading", "gardening", "knitting", "fishing", "hiking", "cooking", "dancing", "singing", "drawing", "sewing",
            "camping", "baking", "chess", "photography", "pottery", "writing", "sculpting", "juggling", "origami", "birdwatching",
            "quilting", "woodworking", "calligraphy",
        ],
    },
    Category {
        name: "city",
        template: "i live in {}",
        values: [
            "paris", "london", "tokyo", "berlin", "rome", "madrid", "dublin", "boston", "chicago", "seattle", "denver", "austin",
            "miami", "toronto", "sydney", "lisbon", "vienna", "prague", "oslo", "cairo", "mumbai", "seoul", "lima", "quito",
        ],
    },
    Category {
        name: "drink",
        template: "i usually drink {}",
        values: [
            "coffee", "tea", "juice", "milk", "water", "soda", "lemonade", "cocoa", "beer", "wine", "cider", "smoothies", "kombucha",
            "espresso", "latte", "mocha", "cola", "milkshakes", "whiskey", "rum", "vodka", "sake", "chai", "gin",
        ],
    },
    Category {
        name: "sport",
        template: "i play {} on weekends",
        values: [
            "soccer", "tennis", "golf", "basketball", "baseball", "hockey", "volleyball", "rugby", "cricket", "badminton", "football",
            "squash", "polo", "lacrosse", "softball", "handball", "bowling", "curling", "darts", "billiards", "racquetball",
            "pickleball", "dodgeball", "netball",
        ],
    },
    Category {
        name: "music",
        template: "i listen to {} songs",
        values: [
            "jazz", "rock", "pop", "blues", "country", "metal", "punk", "reggae", "classical", "folk", "disco", "funk", "techno",
            "soul", "gospel", "opera", "rap", "salsa", "grunge", "ska", "swing", "trance", "bluegrass", "ambient",
        ],
    },
    Category {
        name: "car",
        template: "i drive a {}",
        values: [
            "toyota", "honda", "ford", "tesla", "bmw", "audi", "jeep", "subaru", "volvo", "mazda", "nissan", "kia", "hyundai",
            "porsche", "ferrari", "fiat", "chevy", "dodge", "lexus", "buick", "cadillac", "jaguar", "saab", "acura",
        ],
    },
];

const GREETINGS: [&str; 6] = ["hi", "hello", "hey there", "good morning", "how are you ?", "nice to meet you"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_personas: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_categories: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_personas: 4,
            n_train: 2000,
            n_test: 200,
            n_categories: 8,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_personas == 0 {
            return Err(Error::config("data.n_personas", "must be at least 1"));
        }
        if self.n_categories < self.n_personas {
            return Err(Error::config("data.n_categories", "must be at least n_personas"));
        }
        if self.n_categories > CATEGORIES.len() {
            return Err(Error::config(
                "data.n_categories",
                format!("at most {} categories are available", CATEGORIES.len()),
            ));
        }
        if self.n_train + self.n_test == 0 {
            return Err(Error::config("data.n_train", "corpus would be empty"));
        }
        Ok(())
    }
}

pub struct SyntheticCorpus {
    pub vocab: Vocabulary,
    pub train: Dataset,
    pub test: Dataset,
    pub train_records: Vec<DialogueRecord>,
    pub test_records: Vec<DialogueRecord>,
}

/// The question asking about category `c`.
pub fn question(c: usize) -> String {
    format!("what is your {} ?", CATEGORIES[c].name)
}

/// The gold answer for category `c` holding `value`.
pub fn answer(c: usize, value: &str) -> String {
    format!("my {} is {}", CATEGORIES[c].name, value)
}

fn draw_record(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> DialogueRecord {
    let mut held: Vec<usize> = index::sample(rng, cfg.n_categories, cfg.n_personas).into_vec();
    held.sort_unstable();
    let values: Vec<&str> = held.iter().map(|&c| CATEGORIES[c].values[rng.random_range(0..24)]).collect();
    let persona = held
        .iter()
        .zip(&values)
        .map(|(&c, v)| CATEGORIES[c].template.replace("{}", v))
        .collect();
    let asked = rng.random_range(0..held.len());
    let mut context = Vec::new();
    if rng.random_bool(0.5) {
        context.push(GREETINGS[rng.random_range(0..GREETINGS.len())].to_string());
    }
    context.push(question(held[asked]));
    DialogueRecord {
        persona,
        context,
        response: answer(held[asked], values[asked]),
    }
}

/// Generates train and test splits plus the vocabulary covering both.
/// Vocabulary words follow the specials in sorted order.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train_records: Vec<_> = (0..cfg.n_train).map(|_| draw_record(cfg, &mut rng)).collect();
    let test_records: Vec<_> = (0..cfg.n_test).map(|_| draw_record(cfg, &mut rng)).collect();
    let vocab = build_vocabulary(train_records.iter().chain(&test_records));
    let train = records_to_dataset(&train_records, &vocab, Split::Train)?;
    let test = records_to_dataset(&test_records, &vocab, Split::Test)?;
    Ok(SyntheticCorpus {
        vocab,
        train,
        test,
        train_records,
        test_records,
    })
}

/// Specials followed by every word of `records` in sorted order.
pub fn build_vocabulary<'a>(records: impl IntoIterator<Item = &'a DialogueRecord>) -> Vocabulary {
    let mut words: Vec<String> = records
        .into_iter()
        .flat_map(|r| r.persona.iter().chain(&r.context).chain(std::iter::once(&r.response)))
        .flat_map(|t| super::tokenize(t))
        .collect();
    words.sort();
    words.dedup();
    Vocabulary::new(words)
}

pub(crate) fn records_to_dataset(records: &[DialogueRecord], vocab: &Vocabulary, split: Split) -> Result<Dataset> {
    let samples = records
        .iter()
        .enumerate()
        .map(|(i, r)| r.to_sample(vocab).map_err(|e| Error::Schema { line: i + 1, msg: e.to_string() }))
        .collect::<Result<Vec<DialogueSample>>>()?;
    Dataset::new(split, samples, vocab.len())
}

impl DialogueRecord {
    pub fn to_sample(&self, vocab: &Vocabulary) -> Result<DialogueSample> {
        let persona = PersonaSet::new(self.persona.iter().map(|s| vocab.encode_text(s)).collect())?;
        let context = self.context.iter().map(|u| vocab.encode_text(u)).collect();
        DialogueSample::new(persona, context, vocab.encode_text(&self.response))
    }
}
