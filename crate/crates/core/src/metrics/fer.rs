use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::encoder::SaliencyMap;
use crate::error::{Error, Result};
use crate::synthdata::{Lexicon, PartAnnotation, PartOfSpeech};

/// Adjective run immediately preceding the first occurrence of `head_noun`,
/// followed by the noun itself.
pub fn extract_noun_phrase(tokens: &[String], head_noun: &str, lexicon: &Lexicon) -> Option<Vec<String>> {
    let at = tokens.iter().position(|t| t == head_noun)?;
    let mut start = at;
    while start > 0 && lexicon.pos(&tokens[start - 1]) == PartOfSpeech::Adjective {
        start -= 1;
    }
    Some(tokens[start..=at].to_vec())
}

/// Word hit rate `|ĝ ∩ g| / |g|` on word sets.
pub fn hit_rate(generated: &[String], reference: &[String]) -> f64 {
    let g: BTreeSet<&String> = generated.iter().collect();
    let r: BTreeSet<&String> = reference.iter().collect();
    if r.is_empty() {
        return 0.0;
    }
    g.intersection(&r).count() as f64 / r.len() as f64
}

/// Part whose centre is Euclidean-nearest to `(x, y)`; ties go to the earlier annotation.
pub fn nearest_part(parts: &[PartAnnotation], x: f32, y: f32) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, p) in parts.iter().enumerate() {
        let d = (p.cx - x).powi(2) + (p.cy - y).powi(2);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Everything FER needs about one image.
#[derive(Debug, Clone, Copy)]
pub struct FerImage<'a> {
    pub image_id: &'a str,
    pub generated: &'a [String],
    pub parts: &'a [PartAnnotation],
    pub references: &'a [Vec<String>],
    pub gradcam: Option<&'a SaliencyMap>,
    /// `(width, height)` in pixels, the frame of the part centres.
    pub image_size: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FerRecord {
    pub image_id: String,
    pub y_o: String,
    pub generated_phrase: Option<Vec<String>>,
    pub hit_rates: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FerReport {
    /// Mean per-image score ×100.
    pub mean: f64,
    pub records: Vec<FerRecord>,
    /// Images without a GradCAM map.
    pub skipped: Vec<String>,
}

fn score_image(img: &FerImage<'_>, map: &SaliencyMap, lexicon: &Lexicon) -> Result<FerRecord> {
    let (px, py) = map.peak_in_pixels(img.image_size.0, img.image_size.1);
    let part = &img.parts[nearest_part(img.parts, px, py).expect("parts checked non-empty")];
    let head = part.head_noun();
    let mut record = FerRecord {
        image_id: img.image_id.to_string(),
        y_o: part.name.clone(),
        generated_phrase: None,
        hit_rates: Vec::new(),
        score: 0.0,
    };
    let Some(generated) = extract_noun_phrase(img.generated, head, lexicon) else {
        return Ok(record);
    };
    record.hit_rates = img
        .references
        .iter()
        .filter_map(|r| extract_noun_phrase(r, head, lexicon))
        .map(|g| hit_rate(&generated, &g))
        .collect();
    record.score = record.hit_rates.iter().copied().fold(0.0, f64::max);
    record.generated_phrase = Some(generated);
    Ok(record)
}

/// Faithful explanation rate over a set of images.
pub fn fer_score(images: &[FerImage<'_>], lexicon: &Lexicon) -> Result<FerReport> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for img in images {
        if img.parts.is_empty() {
            return Err(Error::contract(format!("{}: no part annotations", img.image_id)));
        }
        if img.references.is_empty() {
            return Err(Error::contract(format!("{}: no reference sentences", img.image_id)));
        }
        match img.gradcam {
            Some(map) => records.push(score_image(img, map, lexicon)?),
            None => skipped.push(img.image_id.to_string()),
        }
    }
    let mean = if records.is_empty() {
        0.0
    } else {
        100.0 * records.iter().map(|r| r.score).sum::<f64>() / records.len() as f64
    };
    Ok(FerReport { mean, records, skipped })
}
