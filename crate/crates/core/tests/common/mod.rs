//! Fixtures shared by the integration and acceptance tests.

#![allow(dead_code)]

use ghazal_forge::corpus::{CorpusDocument, CorpusOptions};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Opening couplets of a Ghalib ghazal, long enough to cut a 500-character
/// snippet from.
pub const GHAZAL: &str = "\
دل ناداں تجھے ہوا کیا ہے
آخر اس درد کی دوا کیا ہے
ہم ہیں مشتاق اور وہ بیزار
یا الٰہی یہ ماجرا کیا ہے
میں بھی منہ میں زبان رکھتا ہوں
کاش پوچھو کہ مدعا کیا ہے
جب کہ تجھ بن نہیں کوئی موجود
پھر یہ ہنگامہ اے خدا کیا ہے
یہ پری چہرہ لوگ کیسے ہیں
غمزہ و عشوہ و ادا کیا ہے
شکن زلف عنبریں کیوں ہے
نگہ چشم سرمہ سا کیا ہے
سبزہ و گل کہاں سے آئے ہیں
ابر کیا چیز ہے ہوا کیا ہے
ہم کو ان سے وفا کی ہے امید
جو نہیں جانتے وفا کیا ہے
ہاں بھلا کر ترا بھلا ہوگا
اور درویش کی صدا کیا ہے
جان تم پر نثار کرتا ہوں
میں نہیں جانتا دعا کیا ہے
";

/// The first 500 characters of [`GHAZAL`] (already normalized text).
pub fn snippet_500() -> String {
    let s: String = GHAZAL.chars().take(500).collect();
    assert_eq!(s.chars().count(), 500);
    s
}

const WORDS: &[&str] = &[
    "دل", "غم", "عشق", "درد", "رات", "چاند", "آنکھ", "خواب", "یاد", "شام", "سحر", "پھول", "زلف", "نظر", "دنیا",
    "محبت", "وفا", "جفا", "ساقی", "میخانہ", "جام", "بہار", "خزاں", "صبا", "گلشن", "آنسو", "دریا", "ساحل", "منزل",
    "راہ", "مسافر", "شہر", "گلی", "دیوار", "چراغ", "ہوا", "بادل", "بارش", "زندگی", "موت", "وقت", "لمحہ", "صدی",
    "حسن", "جمال", "نور", "سایہ", "دھوپ", "آسمان", "زمین", "ستارہ", "قفس", "پرندہ", "آشیاں", "تنہائی", "محفل",
];
const PARTICLES: &[&str] = &["کا", "کی", "کے", "میں", "سے", "پر", "کو", "بھی", "تو", "ہی", "نہ", "اور"];
const VERBS: &[&str] = &[
    "ہے", "تھا", "ہوا", "گیا", "آیا", "رہا", "ملا", "دیکھا", "سنا", "کہا", "جلا", "بجھا", "ٹوٹا", "بکھرا",
];
const RADIFS: &[&str] = &["کیا ہے", "نہیں ہوتا", "یاد آیا", "کون سنے", "باقی ہے", "کب تک", "جانے دو", "کیوں ہے"];

fn pick<'a, R: Rng>(list: &[&'a str], zipf: &WeightedIndex<f64>, rng: &mut R) -> &'a str {
    list[zipf.sample(rng) % list.len()]
}

fn zipf(n: usize) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| 1.0 / r as f64)).unwrap()
}

/// Deterministic ghazal-shaped corpus: `docs` poems of 5–7 couplets, each
/// verse a short noun/particle/verb phrase closed by the poem's radif.
pub fn synthetic_corpus(docs: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wz, pz, vz) = (zipf(WORDS.len()), zipf(PARTICLES.len()), zipf(VERBS.len()));
    (0..docs)
        .map(|d| {
            let radif = RADIFS[rng.random_range(0..RADIFS.len())];
            let couplets = rng.random_range(5..=7);
            let mut text = String::new();
            for _ in 0..couplets {
                for _ in 0..2 {
                    let mut verse = Vec::new();
                    for _ in 0..rng.random_range(2..=3) {
                        verse.push(pick(WORDS, &wz, &mut rng));
                        verse.push(pick(PARTICLES, &pz, &mut rng));
                    }
                    verse.push(pick(WORDS, &wz, &mut rng));
                    verse.push(pick(VERBS, &vz, &mut rng));
                    verse.push(radif);
                    text.push_str(&verse.join(" "));
                    text.push('\n');
                }
                text.push('\n');
            }
            (format!("ghazal_{d:03}.txt"), text)
        })
        .collect()
}

pub fn synthetic_documents(docs: usize, seed: u64) -> Vec<CorpusDocument> {
    synthetic_corpus(docs, seed)
        .into_iter()
        .map(|(name, text)| CorpusDocument::from_text(name, &text, &CorpusOptions::default()).unwrap())
        .collect()
}

/// Writes the synthetic corpus as `.txt` files into `dir`.
pub fn write_corpus(dir: &std::path::Path, docs: usize, seed: u64) {
    for (name, text) in synthetic_corpus(docs, seed) {
        std::fs::write(dir.join(name), text).unwrap();
    }
}
