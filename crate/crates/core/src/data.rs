//! Identity-labelled image/text pairs, synthetic generation and batch sampling.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Person identity label in `[0, Q)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PersonIdentity(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub identity: PersonIdentity,
    pub sample_id: usize,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.pixels.dim(0)
    }

    pub fn width(&self) -> usize {
        self.pixels.dim(1)
    }

    /// Mirror along the width axis.
    pub fn flipped(&self) -> ImageSample {
        let (h, w) = (self.height(), self.width());
        let src = self.pixels.data();
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (a, b) = ((y * w + x) * 3, (y * w + (w - 1 - x)) * 3);
                out[a..a + 3].copy_from_slice(&src[b..b + 3]);
            }
        }
        ImageSample {
            pixels: Tensor::new(self.pixels.shape(), out).expect("same shape"),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextSample {
    pub tokens: Vec<usize>,
    pub identity: PersonIdentity,
    pub sample_id: usize,
}

/// Token table; id 0 is the out-of-vocabulary bucket.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

pub const OOV_TOKEN: &str = "<unk>";

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::new())
    }
}

impl Vocabulary {
    /// Builds from the words after the OOV slot. A leading OOV entry in
    /// `words` is accepted and not duplicated.
    pub fn from_tokens(words: Vec<String>) -> Self {
        let mut tokens = vec![OOV_TOKEN.to_string()];
        let mut index = BTreeMap::new();
        for w in words {
            if w == OOV_TOKEN && tokens.len() == 1 {
                continue;
            }
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        Self { tokens, index }
    }

    /// Vocabulary over the lowercase whitespace-split words of `texts`, in
    /// order of first appearance.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words = texts
            .into_iter()
            .flat_map(|t| t.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
            .collect();
        Self::from_tokens(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn word(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(OOV_TOKEN, String::as_str)
    }

    /// Lowercase whitespace tokenization; unknown words map to 0.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(&w.to_lowercase())).collect()
    }

    pub fn detokenize(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.word(t)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub images: Vec<ImageSample>,
    pub texts: Vec<TextSample>,
    pub num_identities: usize,
    /// `(image sample_id, text sample_id)`.
    pub pairs: Vec<(usize, usize)>,
    pub vocab: Vocabulary,
    pub max_len: usize,
}

impl PairDataset {
    /// Checks every structural invariant; sample ids must equal list positions.
    pub fn validate(&self) -> Result<()> {
        let q = self.num_identities;
        if q == 0 {
            bail!(Validation, "dataset has no identities");
        }
        let mut has_image = vec![false; q];
        let mut has_text = vec![false; q];
        let shape = self.images.first().map(|i| i.pixels.shape().to_vec());
        for (i, img) in self.images.iter().enumerate() {
            if img.sample_id != i {
                bail!(Validation, "image at position {i} has sample_id {}", img.sample_id);
            }
            if img.identity.0 >= q {
                bail!(Validation, "image {i} identity {} outside [0, {q})", img.identity.0);
            }
            if img.pixels.ndim() != 3 || img.pixels.dim(2) != 3 {
                bail!(Validation, "image {i} must be [H, W, 3], got {:?}", img.pixels.shape());
            }
            if Some(img.pixels.shape().to_vec()) != shape {
                bail!(Validation, "image {i} size differs from the first image");
            }
            if img.pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                bail!(Validation, "image {i} has pixel values outside [0, 1]");
            }
            has_image[img.identity.0] = true;
        }
        for (i, txt) in self.texts.iter().enumerate() {
            if txt.sample_id != i {
                bail!(Validation, "text at position {i} has sample_id {}", txt.sample_id);
            }
            if txt.identity.0 >= q {
                bail!(Validation, "text {i} identity {} outside [0, {q})", txt.identity.0);
            }
            if txt.tokens.is_empty() || txt.tokens.len() > self.max_len {
                bail!(Validation, "text {i} length {} outside [1, {}]", txt.tokens.len(), self.max_len);
            }
            if let Some(t) = txt.tokens.iter().find(|&&t| t >= self.vocab.len()) {
                bail!(Validation, "text {i} token {t} outside vocabulary of {}", self.vocab.len());
            }
            has_text[txt.identity.0] = true;
        }
        if let Some(id) = (0..q).find(|&id| !has_image[id] || !has_text[id]) {
            bail!(Validation, "identity {id} needs at least one image and one text");
        }
        for &(im, tx) in &self.pairs {
            let (Some(a), Some(b)) = (self.images.get(im), self.texts.get(tx)) else {
                bail!(Validation, "pair ({im}, {tx}) references a missing sample");
            };
            if a.identity != b.identity {
                bail!(Validation, "pair ({im}, {tx}) links different identities");
            }
        }
        Ok(())
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.images.first().map_or((0, 0), |i| (i.height(), i.width()))
    }

    /// Image / text sample ids grouped by identity.
    pub fn images_of(&self, id: PersonIdentity) -> Vec<usize> {
        self.images.iter().filter(|i| i.identity == id).map(|i| i.sample_id).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub images_per_id: usize,
    pub texts_per_id: usize,
    pub noise_scale: f64,
    pub seed: u64,
    pub image_height: usize,
    pub image_width: usize,
    pub max_len: usize,
}

impl SyntheticSpec {
    pub fn new(q: usize, images_per_id: usize, texts_per_id: usize, noise_scale: f64, seed: u64) -> Self {
        Self {
            num_identities: q,
            images_per_id,
            texts_per_id,
            noise_scale,
            seed,
            image_height: 48,
            image_width: 16,
            max_len: 24,
        }
    }
}

const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.7, 0.2]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.9, 0.85, 0.2]),
    ("black", [0.08, 0.08, 0.08]),
    ("white", [0.95, 0.95, 0.95]),
    ("purple", [0.55, 0.2, 0.7]),
    ("orange", [0.95, 0.55, 0.1]),
];
const PARTS: [&str; 6] = ["hat", "hair", "shirt", "belt", "pants", "shoes"];
const FILLERS: [&str; 8] = ["a", "the", "person", "with", "and", "wearing", "is", "in"];

fn quantize(v: f64) -> f64 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) / 255.0
}

/// Generates a dataset with the full same-identity image x text cross product.
///
/// Each identity is a latent colour per horizontal body band. Images render
/// the bands on a grey background with Gaussian pixel noise; texts name the
/// colour of a random subset of bands, padded with shared filler words.
/// Pixels are quantized to 8 bits so the data survives file round-trips.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<PairDataset> {
    if spec.num_identities < 2 {
        bail!(Argument, "synthetic data needs Q >= 2, got {}", spec.num_identities);
    }
    if spec.images_per_id == 0 || spec.texts_per_id == 0 {
        bail!(Argument, "images_per_id and texts_per_id must be positive");
    }
    if !(spec.noise_scale >= 0.0) {
        bail!(Argument, "noise_scale must be non-negative");
    }
    if spec.image_height == 0 || spec.image_width == 0 || spec.max_len < 3 {
        bail!(Argument, "image size must be positive and max_len at least 3");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = Vocabulary::from_tokens(
        FILLERS.iter().chain(PARTS.iter()).chain(COLORS.iter().map(|c| &c.0)).map(|s| s.to_string()).collect(),
    );
    let (h, w) = (spec.image_height, spec.image_width);
    let bands = PARTS.len();
    let mut images = Vec::new();
    let mut texts = Vec::new();
    let mut pairs = Vec::new();
    for id in 0..spec.num_identities {
        let identity = PersonIdentity(id);
        let latent: Vec<usize> = (0..bands).map(|_| rng.random_range(0..COLORS.len())).collect();
        let first_image = images.len();
        for _ in 0..spec.images_per_id {
            let mut px = vec![0.0; h * w * 3];
            for y in 0..h {
                let band = y * bands / h;
                for x in 0..w {
                    let person = x >= w / 4 && x < w - w / 4;
                    for ch in 0..3 {
                        let base = if person { COLORS[latent[band]].1[ch] } else { 0.5 };
                        let n: f64 = rng.sample(StandardNormal);
                        px[(y * w + x) * 3 + ch] = quantize(base + spec.noise_scale * n);
                    }
                }
            }
            let sample_id = images.len();
            images.push(ImageSample { pixels: Tensor::new(&[h, w, 3], px)?, identity, sample_id });
        }
        let first_text = texts.len();
        for _ in 0..spec.texts_per_id {
            // redraw duplicates so each text of an identity is distinct
            let mut tokens = Vec::new();
            for _ in 0..64 {
                let mut order: Vec<usize> = (0..bands).collect();
                order.shuffle(&mut rng);
                let described = rng.random_range(2..=4usize);
                let mut words: Vec<&str> = vec!["a", "person"];
                for &band in &order[..described] {
                    words.push(FILLERS[3 + rng.random_range(0..3usize)]);
                    words.push(COLORS[latent[band]].0);
                    words.push(PARTS[band]);
                }
                tokens = words.iter().map(|w| vocab.id(w)).collect();
                tokens.truncate(spec.max_len);
                if !texts[first_text..].iter().any(|t: &TextSample| t.tokens == tokens) {
                    break;
                }
            }
            let sample_id = texts.len();
            texts.push(TextSample { tokens, identity, sample_id });
        }
        for im in first_image..images.len() {
            for tx in first_text..texts.len() {
                pairs.push((im, tx));
            }
        }
    }
    let ds = PairDataset {
        images,
        texts,
        num_identities: spec.num_identities,
        pairs,
        vocab,
        max_len: spec.max_len,
    };
    ds.validate()?;
    Ok(ds)
}

/// Aligned batch of matched pairs (indices into the dataset lists).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub images: Vec<usize>,
    pub texts: Vec<usize>,
    pub identities: Vec<PersonIdentity>,
    /// A text of the same identity paired with a different image, if any.
    pub alt_texts: Vec<Option<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self, ds: &PairDataset) -> Result<()> {
        let n = self.images.len();
        if self.texts.len() != n || self.identities.len() != n || self.alt_texts.len() != n {
            bail!(Validation, "batch lists have different lengths");
        }
        for i in 0..n {
            let id = self.identities[i];
            if ds.images[self.images[i]].identity != id || ds.texts[self.texts[i]].identity != id {
                bail!(Validation, "batch position {i} mixes identities");
            }
            if let Some(alt) = self.alt_texts[i] {
                if ds.texts[alt].identity != id {
                    bail!(Validation, "alt text at position {i} has another identity");
                }
                let other_image =
                    ds.pairs.iter().any(|&(im, tx)| tx == alt && im != self.images[i]);
                if !other_image {
                    bail!(Validation, "alt text at position {i} does not describe another image");
                }
            }
        }
        Ok(())
    }
}

/// Samples identity-distinct batches from a fixed dataset.
#[derive(Clone, Debug)]
pub struct IdentitySampler {
    by_identity: BTreeMap<PersonIdentity, Vec<(usize, usize)>>,
    num_pairs: usize,
}

impl IdentitySampler {
    pub fn new(ds: &PairDataset) -> Self {
        let mut by_identity: BTreeMap<PersonIdentity, Vec<(usize, usize)>> = BTreeMap::new();
        for &(im, tx) in &ds.pairs {
            by_identity.entry(ds.images[im].identity).or_default().push((im, tx));
        }
        Self { by_identity, num_pairs: ds.pairs.len() }
    }

    /// Draws `b` pairs: identities without replacement first (cycling once all
    /// are used), then one pair per drawn identity.
    pub fn sample<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<Batch> {
        if b == 0 {
            bail!(Argument, "batch size must be positive");
        }
        if b > self.num_pairs {
            bail!(Argument, "batch size {b} exceeds the {} available pairs", self.num_pairs);
        }
        let ids: Vec<PersonIdentity> = self.by_identity.keys().copied().collect();
        let mut chosen = Vec::with_capacity(b);
        while chosen.len() < b {
            let mut round = ids.clone();
            round.shuffle(rng);
            round.truncate(b - chosen.len());
            chosen.extend(round);
        }
        let mut batch = Batch {
            images: Vec::with_capacity(b),
            texts: Vec::with_capacity(b),
            identities: Vec::with_capacity(b),
            alt_texts: Vec::with_capacity(b),
        };
        for id in chosen {
            let pairs = &self.by_identity[&id];
            let &(im, tx) = pairs.choose(rng).expect("identity has pairs");
            let alts: Vec<usize> = pairs
                .iter()
                .filter(|&&(i2, t2)| i2 != im && t2 != tx)
                .map(|&(_, t2)| t2)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            batch.images.push(im);
            batch.texts.push(tx);
            batch.identities.push(id);
            batch.alt_texts.push(alts.choose(rng).copied());
        }
        Ok(batch)
    }
}

pub fn sample_identity_batch<R: Rng + ?Sized>(ds: &PairDataset, b: usize, rng: &mut R) -> Result<Batch> {
    IdentitySampler::new(ds).sample(b, rng)
}
