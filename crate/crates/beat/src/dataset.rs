//! Tab-separated pair files.
//!
//! One record per line: `identity<TAB>image_ref<TAB>text`. `image_ref` is a
//! PNG path relative to the file or `inline:<H>x<W>:<hex>` holding the raw
//! `H * W * 3` pixel bytes. Records sharing an `image_ref` refer to the same
//! image and records sharing `(identity, text)` to the same text; sample ids
//! follow first appearance. Empty lines and lines starting with `#` are
//! skipped, except a `# identities: Q` line which fixes the identity count
//! (otherwise it is one more than the largest identity). A `vocab.txt`
//! sidecar lists one token per line, `<unk>` first.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use beat_core::data::{ImageSample, PairDataset, PersonIdentity, TextSample, Vocabulary, OOV_TOKEN};
use beat_core::{BeatError, Tensor};

use crate::error::{CliError, CliResult};

pub const DATASET_FILE: &str = "dataset.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Accepts either the record file or the directory holding `dataset.tsv`.
pub fn resolve(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(DATASET_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_vocab(path: &Path) -> CliResult<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(OOV_TOKEN) {
        return Err(CliError::format(path, format!("first line must be {OOV_TOKEN}")));
    }
    let words: Vec<String> = lines.map(str::to_string).collect();
    let vocab = Vocabulary::from_tokens(words.clone());
    if vocab.len() != words.len() + 1 {
        return Err(CliError::format(path, "duplicate or reserved tokens"));
    }
    Ok(vocab)
}

pub fn write_vocab(vocab: &Vocabulary, path: &Path) -> CliResult<()> {
    let mut s = String::new();
    for t in vocab.tokens() {
        s.push_str(t);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| CliError::io(path, e))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn pixels_from_bytes(h: usize, w: usize, bytes: &[u8]) -> Tensor {
    let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(&[h, w, 3], data).expect("byte count checked by caller")
}

fn decode_image(reference: &str, base: &Path, file: &Path, line: usize) -> CliResult<Tensor> {
    let bad = |m: String| CliError::format(file, format!("line {line}: {m}"));
    if let Some(rest) = reference.strip_prefix("inline:") {
        let (dims, hex_data) = rest.split_once(':').ok_or_else(|| bad("inline image needs <H>x<W>:<hex>".into()))?;
        let (h, w) = dims
            .split_once('x')
            .and_then(|(h, w)| Some((h.parse::<usize>().ok()?, w.parse::<usize>().ok()?)))
            .ok_or_else(|| bad(format!("bad inline image size '{dims}'")))?;
        let bytes = hex::decode(hex_data).map_err(|e| bad(format!("bad inline hex: {e}")))?;
        if bytes.len() != h * w * 3 {
            return Err(bad(format!("inline image holds {} bytes, expected {}", bytes.len(), h * w * 3)));
        }
        return Ok(pixels_from_bytes(h, w, &bytes));
    }
    let path = base.join(reference);
    let img = image::open(&path).map_err(|e| CliError::format(&path, e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(pixels_from_bytes(h as usize, w as usize, img.as_raw()))
}

/// Loads a record file. `vocab` overrides the sidecar; without either the
/// vocabulary is built from the texts. Texts longer than `max_len` tokens
/// are truncated.
pub fn load_dataset(path: &Path, max_len: usize, vocab: Option<&Vocabulary>) -> CliResult<PairDataset> {
    let file = resolve(path);
    let base = file.parent().unwrap_or(Path::new(".")).to_path_buf();
    let content = fs::read_to_string(&file).map_err(|e| CliError::io(&file, e))?;
    let mut records = Vec::new();
    let mut declared = None;
    for (i, raw) in content.lines().enumerate() {
        let line = i + 1;
        if let Some(q) = raw.strip_prefix('#').and_then(|c| c.trim().strip_prefix("identities:")) {
            let q = q.trim().parse::<usize>();
            declared = Some(q.map_err(|_| CliError::format(&file, format!("line {line}: bad identity count")))?);
            continue;
        }
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.splitn(3, '\t').collect();
        let [id, image_ref, text] = fields[..] else {
            return Err(CliError::format(&file, format!("line {line}: expected 3 tab-separated fields")));
        };
        let id: usize = id
            .trim()
            .parse()
            .map_err(|_| CliError::format(&file, format!("line {line}: bad identity '{id}'")))?;
        if text.split_whitespace().next().is_none() {
            return Err(CliError::format(&file, format!("line {line}: empty text")));
        }
        records.push((line, id, image_ref.trim(), text));
    }
    if records.is_empty() {
        return Err(CliError::format(&file, "no records"));
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => {
            let side = base.join(VOCAB_FILE);
            if side.exists() {
                read_vocab(&side)?
            } else {
                Vocabulary::build(records.iter().map(|r| r.3))
            }
        }
    };
    let mut image_ids: HashMap<&str, usize> = HashMap::new();
    let mut text_ids: HashMap<(usize, Vec<usize>), usize> = HashMap::new();
    let mut images: Vec<ImageSample> = Vec::new();
    let mut texts: Vec<TextSample> = Vec::new();
    let mut pairs = Vec::new();
    let mut longest = 0;
    for &(line, id, image_ref, text) in &records {
        let identity = PersonIdentity(id);
        let im = match image_ids.get(image_ref) {
            Some(&im) => {
                if images[im].identity != identity {
                    return Err(CliError::format(&file, format!("line {line}: image reused under another identity")));
                }
                im
            }
            None => {
                let pixels = decode_image(image_ref, &base, &file, line)?;
                let sample_id = images.len();
                images.push(ImageSample { pixels, identity, sample_id });
                image_ids.insert(image_ref, sample_id);
                sample_id
            }
        };
        let mut tokens = vocab.tokenize(text);
        tokens.truncate(max_len);
        longest = longest.max(tokens.len());
        let tx = *text_ids.entry((id, tokens.clone())).or_insert_with(|| {
            texts.push(TextSample { tokens, identity, sample_id: texts.len() });
            texts.len() - 1
        });
        pairs.push((im, tx));
    }
    let num_identities = declared.unwrap_or_else(|| records.iter().map(|r| r.1).max().unwrap_or(0) + 1);
    let ds = PairDataset { images, texts, num_identities, pairs, vocab, max_len: max_len.max(longest) };
    ds.validate().map_err(|e| BeatError::Validation(format!("{}: {}", file.display(), detail(&e))))?;
    Ok(ds)
}

fn detail(e: &BeatError) -> String {
    match e {
        BeatError::Validation(m) => m.clone(),
        other => other.to_string(),
    }
}

/// How images are referenced when saving.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageStorage {
    /// One PNG per image under `images/`.
    Png,
    /// Raw bytes inside the record file.
    Inline,
}

/// Writes `dataset.tsv`, `vocab.txt` and (for PNG storage) `images/` into
/// `dir`. Every sample must occur in some pair, and samples must first
/// occur in id order, so that loading reproduces the dataset.
pub fn save_dataset(ds: &PairDataset, dir: &Path, storage: ImageStorage) -> CliResult<PathBuf> {
    let file = dir.join(DATASET_FILE);
    let (mut next_image, mut next_text) = (0, 0);
    for &(im, tx) in &ds.pairs {
        if im > next_image || tx > next_text {
            return Err(CliError::format(&file, "pairs do not introduce samples in id order"));
        }
        next_image = next_image.max(im + 1);
        next_text = next_text.max(tx + 1);
    }
    if next_image != ds.images.len() || next_text != ds.texts.len() {
        return Err(CliError::format(&file, "some samples belong to no pair"));
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut refs = Vec::with_capacity(ds.images.len());
    for img in &ds.images {
        let (h, w) = (img.height(), img.width());
        let bytes: Vec<u8> = img.pixels.data().iter().map(|&v| quantize(v)).collect();
        refs.push(match storage {
            ImageStorage::Inline => format!("inline:{h}x{w}:{}", hex::encode(&bytes)),
            ImageStorage::Png => {
                let rel = format!("images/{:06}.png", img.sample_id);
                let path = dir.join(&rel);
                fs::create_dir_all(path.parent().unwrap()).map_err(|e| CliError::io(dir, e))?;
                let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer size matches");
                buf.save(&path).map_err(|e| CliError::format(&path, e.to_string()))?;
                rel
            }
        });
    }
    let mut out = String::new();
    for &(im, tx) in &ds.pairs {
        let text = ds.vocab.detokenize(&ds.texts[tx].tokens);
        writeln!(out, "{}\t{}\t{}", ds.images[im].identity.0, refs[im], text).unwrap();
    }
    fs::write(&file, out).map_err(|e| CliError::io(&file, e))?;
    write_vocab(&ds.vocab, &dir.join(VOCAB_FILE))?;
    Ok(file)
}
