//! Deterministic "parts on a grid" dataset: coloured shapes placed in the cells
//! of a 4×4 grid, a class decided by one discriminative part, and templated
//! reference captions.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Image, IMAGE_SIZE};
use crate::error::{Error, Result};

pub const GRID: usize = 4;
pub const CELL: usize = IMAGE_SIZE / GRID;
pub const CAPTIONS_PER_IMAGE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Circle,
    Triangle,
    Square,
    Bar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Triangle, Shape::Square, Shape::Bar];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Square => "square",
            Shape::Bar => "bar",
        }
    }

    /// Whether local pixel `(x, y)` of the 7×7 part box is inked.
    fn covers(self, x: i32, y: i32) -> bool {
        match self {
            Shape::Square => true,
            Shape::Circle => (x - 3) * (x - 3) + (y - 3) * (y - 3) <= 10,
            Shape::Triangle => (x - 3).abs() <= y / 2,
            Shape::Bar => (2..=4).contains(&y),
        }
    }
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::White];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::White => "white",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::White => [1.0, 1.0, 1.0],
        }
    }
}

/// A coloured shape occupying one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartSpec {
    pub shape: Shape,
    pub color: Color,
    /// Flat cell index `row·GRID + col`.
    pub cell: usize,
}

impl PartSpec {
    pub fn name(&self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }

    pub fn phrase(&self) -> Vec<String> {
        vec![self.color.word().to_string(), self.shape.word().to_string()]
    }

    /// Pixel centre of the part.
    pub fn center(&self) -> (f32, f32) {
        let (row, col) = (self.cell / GRID, self.cell % GRID);
        ((col * CELL + 4) as f32, (row * CELL + 4) as f32)
    }

    /// Inclusive pixel bounding box `(x0, y0, x1, y1)` of the rendered part.
    pub fn bounding_box(&self) -> (usize, usize, usize, usize) {
        let (row, col) = (self.cell / GRID, self.cell % GRID);
        let (x0, y0) = (col * CELL + 1, row * CELL + 1);
        (x0, y0, x0 + 6, y0 + 6)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SceneSpec {
    pub parts: Vec<PartSpec>,
    /// Index into `parts` of the class-deciding part.
    pub discriminative: usize,
}

/// Rasterizes a scene on a black background, no anti-aliasing.
pub fn render_example(spec: &SceneSpec) -> Image {
    let mut img = Image::blank(IMAGE_SIZE, IMAGE_SIZE);
    for part in &spec.parts {
        let (x0, y0, _, _) = part.bounding_box();
        for y in 0..7 {
            for x in 0..7 {
                if part.shape.covers(x, y) {
                    img.set_pixel(x0 + x as usize, y0 + y as usize, part.color.rgb());
                }
            }
        }
    }
    img
}

const FRAMES: [&str; 2] = ["this object has a", "the object has a"];
const CONNECTIVES: [&str; 2] = ["and", "with"];

/// Three captions for a scene plus the (constant) noun phrase of every part,
/// in `spec.parts` order. Part order and connectives vary per caption.
pub fn caption_templates(spec: &SceneSpec, rng: &mut impl Rng) -> (Vec<String>, Vec<Vec<String>>) {
    let phrases: Vec<Vec<String>> = spec.parts.iter().map(PartSpec::phrase).collect();
    let mut captions = Vec::with_capacity(CAPTIONS_PER_IMAGE);
    for _ in 0..CAPTIONS_PER_IMAGE {
        let mut words: Vec<String> = FRAMES.choose(rng).expect("frames").split(' ').map(str::to_string).collect();
        let mut order: Vec<usize> = (0..spec.parts.len()).collect();
        order.shuffle(rng);
        for (n, i) in order.into_iter().enumerate() {
            if n > 0 {
                words.push(CONNECTIVES.choose(rng).expect("connectives").to_string());
            }
            words.extend(phrases[i].iter().cloned());
        }
        captions.push(words.join(" "));
    }
    (captions, phrases)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartOfSpeech {
    Adjective,
    Noun,
    Other,
}

/// Closed part-of-speech lexicon over the caption vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lexicon(pub BTreeMap<String, PartOfSpeech>);

impl Lexicon {
    pub fn synthetic() -> Self {
        let mut map = BTreeMap::new();
        for c in Color::ALL {
            map.insert(c.word().to_string(), PartOfSpeech::Adjective);
        }
        for s in Shape::ALL {
            map.insert(s.word().to_string(), PartOfSpeech::Noun);
        }
        for frame in FRAMES {
            for w in frame.split(' ') {
                map.insert(w.to_string(), PartOfSpeech::Other);
            }
        }
        for w in CONNECTIVES {
            map.insert(w.to_string(), PartOfSpeech::Other);
        }
        Self(map)
    }

    pub fn pos(&self, word: &str) -> PartOfSpeech {
        self.0.get(word).copied().unwrap_or(PartOfSpeech::Other)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartAnnotation {
    pub name: String,
    pub cx: f32,
    pub cy: f32,
}

impl PartAnnotation {
    /// Head noun: the last word of the part name.
    pub fn head_noun(&self) -> &str {
        self.name.rsplit(' ').next().unwrap_or(&self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One line of `data.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub id: String,
    pub split: Split,
    pub class: usize,
    pub parts: Vec<PartAnnotation>,
    pub discriminative_part: String,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SynthExample {
    pub record: SynthRecord,
    pub scene: SceneSpec,
    pub image: Image,
}

impl SynthExample {
    pub fn discriminative(&self) -> &PartSpec {
        &self.scene.parts[self.scene.discriminative]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataConfig {
    pub num_classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            train_size: 800,
            test_size: 100,
            seed: 7,
        }
    }
}

/// Maximum class count that still leaves a distractor colour for every shape.
pub const MAX_CLASSES: usize = Shape::ALL.len() * (Color::ALL.len() - 1);

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return Err(Error::contract(format!(
                "num_classes must be in 1..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::contract("train and test sizes must be positive"));
        }
        Ok(())
    }

    /// `(shape, colour)` of class `k`, colour-major so every shape keeps a
    /// non-class colour for distractors.
    pub fn class_key(&self, k: usize) -> (Shape, Color) {
        (Shape::ALL[k % Shape::ALL.len()], Color::ALL[k / Shape::ALL.len()])
    }

    pub fn class_of(&self, shape: Shape, color: Color) -> Option<usize> {
        (0..self.num_classes).find(|&k| self.class_key(k) == (shape, color))
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DataConfig,
    pub lexicon: Lexicon,
    pub examples: Vec<SynthExample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SynthExample> {
        self.examples.iter().filter(move |e| e.record.split == split)
    }

    pub fn train(&self) -> Vec<&SynthExample> {
        self.split(Split::Train).collect()
    }

    pub fn test(&self) -> Vec<&SynthExample> {
        self.split(Split::Test).collect()
    }
}

fn random_scene(config: &DataConfig, class: usize, rng: &mut impl Rng) -> SceneSpec {
    let (shape, color) = config.class_key(class);
    let count = rng.gen_range(2..=4);
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    cells.shuffle(rng);
    let mut shapes: Vec<Shape> = Shape::ALL.iter().copied().filter(|&s| s != shape).collect();
    shapes.shuffle(rng);
    let mut parts = vec![PartSpec {
        shape,
        color,
        cell: cells[0],
    }];
    for (i, &s) in shapes.iter().take(count - 1).enumerate() {
        let colors: Vec<Color> = Color::ALL.iter().copied().filter(|&c| config.class_of(s, c).is_none()).collect();
        parts.push(PartSpec {
            shape: s,
            color: *colors.choose(rng).expect("validated config leaves a distractor colour"),
            cell: cells[i + 1],
        });
    }
    // the discriminative part is not always listed first
    let at = rng.gen_range(0..parts.len());
    parts.swap(0, at);
    SceneSpec { parts, discriminative: at }
}

/// Builds the dataset in memory. Identical configs give identical datasets.
pub fn build_dataset(config: &DataConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut examples = Vec::with_capacity(config.train_size + config.test_size);
    let splits = std::iter::repeat(Split::Train)
        .take(config.train_size)
        .chain(std::iter::repeat(Split::Test).take(config.test_size));
    for (i, split) in splits.enumerate() {
        let class = rng.gen_range(0..config.num_classes);
        let scene = random_scene(config, class, &mut rng);
        let (captions, _) = caption_templates(&scene, &mut rng);
        let image = render_example(&scene);
        let parts = scene
            .parts
            .iter()
            .map(|p| {
                let (cx, cy) = p.center();
                PartAnnotation { name: p.name(), cx, cy }
            })
            .collect();
        let prefix = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let record = SynthRecord {
            id: format!("{prefix}-{i:05}"),
            split,
            class,
            parts,
            discriminative_part: scene.parts[scene.discriminative].name(),
            captions,
        };
        examples.push(SynthExample { record, scene, image });
    }
    Ok(Dataset {
        config: *config,
        lexicon: Lexicon::synthetic(),
        examples,
    })
}

/// Writes `images/*.ppm`, `data.jsonl`, `lexicon.json` and `config.json`.
/// The config is validated before anything touches the filesystem.
pub fn generate_dataset(config: &DataConfig, dir: &Path) -> Result<Dataset> {
    let dataset = build_dataset(config)?;
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::path(&images, e))?;
    let mut jsonl = Vec::new();
    for ex in &dataset.examples {
        ex.image.write_ppm(&images.join(format!("{}.ppm", ex.record.id)))?;
        serde_json::to_writer(&mut jsonl, &ex.record)?;
        jsonl.write_all(b"\n")?;
    }
    write_file(&dir.join("data.jsonl"), &jsonl)?;
    write_file(&dir.join("lexicon.json"), &serde_json::to_vec_pretty(&dataset.lexicon)?)?;
    write_file(&dir.join("config.json"), &serde_json::to_vec_pretty(config)?)?;
    Ok(dataset)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::path(path, e))
}

/// Parses `"red triangle"` back into a part.
fn parse_part(name: &str, cx: f32, cy: f32) -> Result<PartSpec> {
    let mut words = name.split(' ');
    let (c, s) = (words.next().unwrap_or(""), words.next().unwrap_or(""));
    let color = Color::ALL.into_iter().find(|x| x.word() == c);
    let shape = Shape::ALL.into_iter().find(|x| x.word() == s);
    let (Some(color), Some(shape)) = (color, shape) else {
        return Err(Error::Format(format!("unknown part name {name:?}")));
    };
    let (col, row) = ((cx as usize) / CELL, (cy as usize) / CELL);
    if col >= GRID || row >= GRID {
        return Err(Error::Format(format!("part {name:?} centre outside the grid")));
    }
    Ok(PartSpec {
        shape,
        color,
        cell: row * GRID + col,
    })
}

/// Loads a directory written by [`generate_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let config_path = dir.join("config.json");
    let config: DataConfig = serde_json::from_str(
        &std::fs::read_to_string(&config_path).map_err(|e| Error::path(&config_path, e))?,
    )?;
    let lexicon = Lexicon::read(&dir.join("lexicon.json"))?;
    let data_path = dir.join("data.jsonl");
    let file = std::fs::File::open(&data_path).map_err(|e| Error::path(&data_path, e))?;
    let mut examples = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SynthRecord = serde_json::from_str(&line)?;
        let parts = record
            .parts
            .iter()
            .map(|p| parse_part(&p.name, p.cx, p.cy))
            .collect::<Result<Vec<_>>>()?;
        let discriminative = record
            .parts
            .iter()
            .position(|p| p.name == record.discriminative_part)
            .ok_or_else(|| Error::Format(format!("{}: discriminative part not annotated", record.id)))?;
        let image = Image::read_ppm(&dir.join("images").join(format!("{}.ppm", record.id)))?;
        examples.push(SynthExample {
            record,
            scene: SceneSpec { parts, discriminative },
            image,
        });
    }
    Ok(Dataset {
        config,
        lexicon,
        examples,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    #[test]
    fn empty_scene_is_uniform_background() {
        let img = render_example(&SceneSpec::default());
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_part_stays_in_its_cell() {
        let spec = SceneSpec {
            parts: vec![PartSpec {
                shape: Shape::Square,
                color: Color::Red,
                cell: 0,
            }],
            discriminative: 0,
        };
        let img = render_example(&spec);
        for y in 0..32 {
            for x in 0..32 {
                let lit = img.pixel(x, y) != [0.0; 3];
                if lit {
                    assert!(x < CELL && y < CELL, "pixel {x},{y} outside cell 0");
                }
            }
        }
        assert_eq!(img.pixel(4, 4), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn shapes_have_distinct_footprints() {
        let counts: Vec<usize> = Shape::ALL
            .iter()
            .map(|s| (0..7).flat_map(|y| (0..7).map(move |x| (x, y))).filter(|&(x, y)| s.covers(x, y)).count())
            .collect();
        let unique: BTreeSet<_> = counts.iter().collect();
        assert_eq!(unique.len(), 4, "{counts:?}");
    }

    #[test]
    fn twelve_classes_cover_twelve_keys() {
        let config = DataConfig {
            num_classes: 12,
            train_size: 300,
            test_size: 10,
            seed: 3,
        };
        let ds = build_dataset(&config).unwrap();
        let keys: BTreeSet<_> = (0..12).map(|k| config.class_key(k)).collect();
        assert_eq!(keys.len(), 12);
        let seen: BTreeSet<usize> = ds.examples.iter().map(|e| e.record.class).collect();
        assert_eq!(seen, (0..12).collect());
        for ex in &ds.examples {
            let d = ex.discriminative();
            assert_eq!(config.class_of(d.shape, d.color), Some(ex.record.class));
            // no other part is a class key, and shapes are distinct
            let shapes: BTreeSet<_> = ex.scene.parts.iter().map(|p| p.shape).collect();
            assert_eq!(shapes.len(), ex.scene.parts.len());
            for (i, p) in ex.scene.parts.iter().enumerate() {
                if i != ex.scene.discriminative {
                    assert_eq!(config.class_of(p.shape, p.color), None);
                }
            }
        }
    }

    #[test]
    fn infeasible_config_rejected() {
        let config = DataConfig {
            num_classes: 17,
            ..DataConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        assert!(matches!(generate_dataset(&config, &out), Err(Error::Contract(_))));
        assert!(!out.exists());
    }

    #[test]
    fn annotations_inside_bounding_boxes() {
        let ds = build_dataset(&DataConfig {
            train_size: 50,
            test_size: 5,
            ..DataConfig::default()
        })
        .unwrap();
        for ex in &ds.examples {
            assert!((2..=4).contains(&ex.scene.parts.len()));
            for (p, a) in ex.scene.parts.iter().zip(&ex.record.parts) {
                let (x0, y0, x1, y1) = p.bounding_box();
                let (cx, cy) = (a.cx as usize, a.cy as usize);
                assert!((x0..=x1).contains(&cx) && (y0..=y1).contains(&cy));
                let px = ex.image.pixel(cx, cy);
                assert_eq!(px, p.color.rgb(), "centre pixel of {} is inked", a.name);
            }
        }
    }

    #[test]
    fn every_caption_mentions_every_part_once() {
        let ds = build_dataset(&DataConfig {
            train_size: 40,
            test_size: 5,
            ..DataConfig::default()
        })
        .unwrap();
        for ex in &ds.examples {
            assert_eq!(ex.record.captions.len(), 3);
            for cap in &ex.record.captions {
                for p in &ex.scene.parts {
                    assert_eq!(cap.matches(p.shape.word()).count(), 1, "{cap}");
                    assert!(cap.contains(&p.name()), "{cap} lacks {}", p.name());
                }
                assert!(cap.split(' ').count() < 20);
            }
        }
    }

    #[test]
    fn single_part_captions_differ_only_in_frame() {
        let spec = SceneSpec {
            parts: vec![PartSpec {
                shape: Shape::Bar,
                color: Color::Blue,
                cell: 6,
            }],
            discriminative: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (caps, phrases) = caption_templates(&spec, &mut rng);
        for c in &caps {
            assert!(FRAMES.iter().any(|f| *c == format!("{f} blue bar")), "{c}");
        }
        assert_eq!(phrases, vec![vec!["blue".to_string(), "bar".to_string()]]);
    }

    #[test]
    fn discriminative_phrase_constant_across_captions() {
        let ds = build_dataset(&DataConfig {
            train_size: 10,
            test_size: 2,
            ..DataConfig::default()
        })
        .unwrap();
        let lex = Lexicon::synthetic();
        for ex in &ds.examples {
            let d = ex.discriminative();
            let found: Vec<Vec<String>> = ex
                .record
                .captions
                .iter()
                .filter_map(|c| {
                    let words: Vec<String> = c.split(' ').map(str::to_string).collect();
                    crate::metrics::extract_noun_phrase(&words, d.shape.word(), &lex)
                })
                .collect();
            assert_eq!(found.len(), 3);
            assert!(found.iter().all(|p| *p == d.phrase()));
        }
    }

    #[test]
    fn lexicon_tags_colours_and_shapes() {
        let lex = Lexicon::synthetic();
        for (w, pos) in &lex.0 {
            let is_color = Color::ALL.iter().any(|c| c.word() == w);
            let is_shape = Shape::ALL.iter().any(|s| s.word() == w);
            assert_eq!(*pos == PartOfSpeech::Adjective, is_color, "{w}");
            assert_eq!(*pos == PartOfSpeech::Noun, is_shape, "{w}");
        }
    }

    #[test]
    fn generation_is_byte_identical_and_loads_back() {
        let config = DataConfig {
            train_size: 12,
            test_size: 4,
            ..DataConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        generate_dataset(&config, &a).unwrap();
        generate_dataset(&config, &b).unwrap();
        for name in ["data.jsonl", "lexicon.json", "config.json", "images/train-00003.ppm", "images/test-00014.ppm"] {
            assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
        }
        let loaded = load_dataset(&a).unwrap();
        let built = build_dataset(&config).unwrap();
        assert_eq!(loaded.examples.len(), 16);
        for (l, r) in loaded.examples.iter().zip(&built.examples) {
            assert_eq!(l.record, r.record);
            assert_eq!(l.scene, r.scene);
            assert_eq!(l.image, r.image);
        }
    }
}
