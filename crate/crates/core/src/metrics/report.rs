use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{bleu4, corpus_bleu4, fer_score, rouge_l, BleuSmoothing, CiderCorpus, FerImage, FerRecord};
use crate::encoder::SaliencyMap;
use crate::error::{Error, Result};
use crate::synthdata::{Lexicon, PartAnnotation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Bleu4,
    RougeL,
    CiderD,
    Fer,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Bleu4, Metric::RougeL, Metric::CiderD, Metric::Fer];
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bleu4" | "bleu" => Ok(Metric::Bleu4),
            "rougel" | "rouge" => Ok(Metric::RougeL),
            "cider" | "ciderd" => Ok(Metric::CiderD),
            "fer" => Ok(Metric::Fer),
            other => Err(Error::contract(format!("unknown metric {other:?}"))),
        }
    }
}

/// One evaluated image.
#[derive(Debug, Clone)]
pub struct ScoredImage {
    pub id: String,
    pub generated: Vec<String>,
    pub references: Vec<Vec<String>>,
    pub parts: Vec<PartAnnotation>,
    pub gradcam: Option<SaliencyMap>,
    pub image_size: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ImageScores {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu4: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cider_d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fer: Option<FerRecord>,
}

/// Corpus BLEU-4 and mean ROUGE-L lie in `[0,1]`; mean CIDEr-D in `[0,10]`;
/// FER in `[0,100]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu4: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cider_d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fer: Option<f64>,
    pub per_image: Vec<ImageScores>,
    pub skipped: Vec<String>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn evaluate(images: &[ScoredImage], metrics: &[Metric], lexicon: &Lexicon) -> Result<EvalReport> {
    let wants = |m| metrics.contains(&m);
    let mut per_image: Vec<ImageScores> = images
        .iter()
        .map(|img| ImageScores {
            id: img.id.clone(),
            bleu4: None,
            rouge_l: None,
            cider_d: None,
            fer: None,
        })
        .collect();
    let mut report = EvalReport {
        bleu4: None,
        rouge_l: None,
        cider_d: None,
        fer: None,
        per_image: Vec::new(),
        skipped: Vec::new(),
    };

    if wants(Metric::Bleu4) {
        for (s, img) in per_image.iter_mut().zip(images) {
            s.bleu4 = Some(bleu4(&img.generated, &img.references, BleuSmoothing::None)?);
        }
        let pairs: Vec<_> = images.iter().map(|i| (i.generated.clone(), i.references.clone())).collect();
        report.bleu4 = Some(corpus_bleu4(&pairs)?);
    }
    if wants(Metric::RougeL) {
        for (s, img) in per_image.iter_mut().zip(images) {
            s.rouge_l = Some(rouge_l(&img.generated, &img.references)?);
        }
        report.rouge_l = Some(mean(per_image.iter().filter_map(|s| s.rouge_l)));
    }
    if wants(Metric::CiderD) {
        let sets: Vec<Vec<Vec<String>>> = images.iter().map(|i| i.references.clone()).collect();
        let corpus = CiderCorpus::new(&sets)?;
        for (s, img) in per_image.iter_mut().zip(images) {
            s.cider_d = Some(corpus.score(&img.generated, &img.references));
        }
        report.cider_d = Some(mean(per_image.iter().filter_map(|s| s.cider_d)));
    }
    if wants(Metric::Fer) {
        let inputs: Vec<FerImage<'_>> = images
            .iter()
            .map(|i| FerImage {
                image_id: &i.id,
                generated: &i.generated,
                parts: &i.parts,
                references: &i.references,
                gradcam: i.gradcam.as_ref(),
                image_size: i.image_size,
            })
            .collect();
        let fer = fer_score(&inputs, lexicon)?;
        for rec in fer.records {
            if let Some(s) = per_image.iter_mut().find(|s| s.id == rec.image_id) {
                s.fer = Some(rec);
            }
        }
        report.fer = Some(fer.mean);
        report.skipped = fer.skipped;
    }
    report.per_image = per_image;
    Ok(report)
}
