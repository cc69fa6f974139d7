//! End-to-end synthetic run: classifier, explainer, caption and faithfulness metrics.
//!
//! `cargo run --release -p fae-core --example pipeline -- [seed] [lambda_align]`

use std::time::Instant;

use fae_core::alignment::realign_tokens;
use fae_core::encoder::{ClassifierConfig, Image, SaliencyMap};
use fae_core::explainer::{DecodeMode, StepSet, Vocabulary};
use fae_core::metrics::{corpus_bleu4, fer_score, tokenize, FerImage};
use fae_core::synthdata::{build_dataset, DataConfig, SynthExample};
use fae_core::training::{
    accuracy, caption_examples, extract_features, init_classifier, init_explainer, train_classifier, train_explainer,
    ClassifierTrainConfig, ExplainerDims, TrainConfig,
};

fn labeled<'a>(set: &[&'a SynthExample]) -> Vec<(&'a Image, usize)> {
    set.iter().map(|e| (&e.image, e.record.class)).collect()
}

fn images<'a>(set: &[&'a SynthExample]) -> Vec<&'a Image> {
    set.iter().map(|e| &e.image).collect()
}

fn main() -> fae_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);
    let lambda_align: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let start = Instant::now();

    let data = build_dataset(&DataConfig::default())?;
    let (train, test) = (data.train(), data.test());
    let ccfg = ClassifierTrainConfig::default();
    let mut classifier: fae_core::encoder::Classifier = init_classifier(ClassifierConfig::reference(data.config.num_classes), ccfg.seed);
    train_classifier(&ccfg, &mut classifier, &labeled(&train))?;
    println!("classifier accuracy {:.3} ({:.0?})", accuracy(&classifier, &labeled(&test))?, start.elapsed());

    let vocab = Vocabulary::from_captions(train.iter().flat_map(|e| e.record.captions.iter().map(String::as_str)));
    let train_features = extract_features(&classifier, &images(&train))?;
    let captions: Vec<Vec<String>> = train.iter().map(|e| e.record.captions.clone()).collect();
    let examples = caption_examples(&train_features, &captions, &vocab);

    let cfg = TrainConfig { seed, lambda_align, ..TrainConfig::default() };
    let (mut explainer, mut aligner) = init_explainer(vocab.len(), &train_features[0], &ExplainerDims::default(), &cfg)?;
    let log = train_explainer(&cfg, &mut explainer, &mut aligner, &examples)?;
    let (first, last) = (log.epochs.first().unwrap(), log.epochs.last().unwrap());
    println!("explainer ce {:.3} -> {:.3} ({:.0?})", first.ce, last.ce, start.elapsed());

    let test_features = extract_features(&classifier, &images(&test))?;
    let all_steps = StepSet::all(explainer.config.max_len);
    let (mut plain, mut enforced, mut refs, mut cams) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut l1, mut steps) = (0.0, 0usize);
    for (f, e) in test_features.iter().zip(&test) {
        let rec = explainer.generate(f, DecodeMode::Greedy)?.with_vocabulary(&vocab);
        let realigned = realign_tokens(&explainer, &aligner, f, &rec.token_ids)?;
        l1 += fae_core::alignment::alignment_loss(&rec.attention, &realigned)?;
        steps += rec.attention.len();
        let eps = SaliencyMap::one_hot(4, 4, e.discriminative().cell, 10.0);
        enforced.push(explainer.generate_enforced(f, &eps, &all_steps, "ground truth")?.with_vocabulary(&vocab).tokens);
        plain.push(rec.tokens);
        refs.push(e.record.captions.iter().map(|c| tokenize(c)).collect::<Vec<_>>());
        cams.push(classifier.gradcam(&e.image, classifier.predict(&e.image)?)?);
    }
    let pairs: Vec<_> = plain.iter().cloned().zip(refs.iter().cloned()).collect();
    println!("BLEU-4 {:.3}", corpus_bleu4(&pairs)?);
    println!("held-out mean per-step L1(α, ᾱ) {:.4}", l1 / steps.max(1) as f64);
    for (name, generated) in [("unenforced", &plain), ("enforced", &enforced)] {
        let fer_images: Vec<FerImage> = test
            .iter()
            .enumerate()
            .map(|(i, e)| FerImage {
                image_id: &e.record.id,
                generated: &generated[i],
                parts: &e.record.parts,
                references: &refs[i],
                gradcam: Some(&cams[i]),
                image_size: (e.image.width, e.image.height),
            })
            .collect();
        println!("FER {name} {:.2}", fer_score(&fer_images, &data.lexicon)?.mean);
    }
    println!("sample: {}", plain[0].join(" "));
    println!("total {:.0?}", start.elapsed());
    Ok(())
}
