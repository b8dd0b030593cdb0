//! Synthetic vision-grounded QA task: scenes of colored shapes at slot
//! locations, encoded as feature vectors over a fixed orthogonal codebook.
//! Questions are answerable from the features alone and only from them,
//! which is what makes the knowledge-injection claim testable.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memvp::VisualFeatures;
use crate::numkit::Matrix;

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 4] = ["cube", "ball", "cone", "ring"];
pub const MAX_SLOTS: usize = 8;

/// Fixed token table. The trailing ids are reserved fillers so the desk
/// vocabulary size stays a round 64.
#[derive(Debug, Clone)]
pub struct Vocab {
    names: Vec<String>,
}

impl Vocab {
    pub fn desk() -> Vocab {
        let mut names: Vec<String> = vec![
            "<ans>".into(),
            "<eos>".into(),
            "what".into(),
            "color".into(),
            "shape".into(),
            "at".into(),
            "is".into(),
            "there".into(),
            "?".into(),
        ];
        for l in 0..MAX_SLOTS {
            names.push(format!("loc{l}"));
        }
        names.extend(COLORS.iter().map(|s| s.to_string()));
        names.extend(SHAPES.iter().map(|s| s.to_string()));
        names.push("yes".into());
        names.push("no".into());
        names.push("none".into());
        while names.len() < 64 {
            names.push(format!("<unused{}>", names.len()));
        }
        Vocab { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn ans(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn loc(&self, l: usize) -> usize {
        9 + l
    }

    pub fn color(&self, c: usize) -> usize {
        9 + MAX_SLOTS + c
    }

    pub fn shape(&self, s: usize) -> usize {
        9 + MAX_SLOTS + COLORS.len() + s
    }

    pub fn yes(&self) -> usize {
        self.shape(SHAPES.len() - 1) + 1
    }

    pub fn no(&self) -> usize {
        self.yes() + 1
    }

    pub fn none(&self) -> usize {
        self.no() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_slots: usize,
    /// Feature dimension d'. Must hold one orthogonal code per slot, color,
    /// and shape.
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub n_scenes: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub min_occupied: usize,
    pub max_occupied: usize,
}

impl DatasetSpec {
    pub fn desk() -> Self {
        DatasetSpec {
            n_slots: 8,
            feature_dim: 16,
            noise_sigma: 0.02,
            n_scenes: 1200,
            train_frac: 0.8,
            val_frac: 0.1,
            min_occupied: 3,
            max_occupied: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_slots == 0 || self.n_slots > MAX_SLOTS {
            return Err(Error::config(format!(
                "n_slots must be in 1..={MAX_SLOTS}"
            )));
        }
        let codes_needed = self.n_slots + COLORS.len() + SHAPES.len();
        if self.feature_dim < codes_needed {
            return Err(Error::config(format!(
                "feature_dim {} cannot host {codes_needed} orthogonal codes",
                self.feature_dim
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        if self.n_scenes < 3 {
            return Err(Error::config("need at least 3 scenes for the splits"));
        }
        if !(0.0..1.0).contains(&self.train_frac)
            || !(0.0..1.0).contains(&self.val_frac)
            || self.train_frac + self.val_frac >= 1.0
        {
            return Err(Error::config("train/val fractions must leave room for test"));
        }
        if self.min_occupied == 0
            || self.min_occupied > self.max_occupied
            || self.max_occupied >= self.n_slots
        {
            return Err(Error::config(
                "occupancy must satisfy 0 < min <= max < n_slots (at least one empty slot)",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QType {
    ColorAt,
    ShapeAt,
    Exists,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub scene_id: u64,
    pub qtype: QType,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub location: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub color: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub shape: Option<usize>,
    /// Feature row holding the queried location, when it is occupied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub slot_row: Option<usize>,
}

/// One QA sample: the scene features (one row per occupied slot, ordered
/// by location), a tokenized question ending in the answer marker, and the
/// single-token answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<Vec<f64>>,
    pub question: Vec<usize>,
    pub answer: usize,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn features_matrix(&self) -> Result<Matrix> {
        Matrix::from_rows(&self.features)
    }

    pub fn visual(&self) -> Result<VisualFeatures> {
        Ok(VisualFeatures::local(self.features_matrix()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

/// Orthonormal attribute codes drawn once per dataset seed.
struct Codebook {
    /// n_slots location codes, then 4 color codes, then 4 shape codes.
    rows: Matrix,
    n_slots: usize,
}

impl Codebook {
    fn generate(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Codebook {
        let dim = spec.feature_dim;
        let needed = spec.n_slots + COLORS.len() + SHAPES.len();
        // Gram-Schmidt on Gaussian rows; resample on (vanishingly unlikely)
        // near-dependence
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(needed);
        while rows.len() < needed {
            let candidate = Matrix::random_normal(1, dim, 1.0, rng);
            let mut v: Vec<f64> = candidate.row(0).to_vec();
            for prev in &rows {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (vi, pi) in v.iter_mut().zip(prev) {
                    *vi -= dot * pi;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                continue;
            }
            for vi in &mut v {
                *vi /= norm;
            }
            rows.push(v);
        }
        Codebook {
            rows: Matrix::from_rows(&rows).expect("codebook"),
            n_slots: spec.n_slots,
        }
    }

    fn location(&self, l: usize) -> &[f64] {
        self.rows.row(l)
    }

    fn color(&self, c: usize) -> &[f64] {
        self.rows.row(self.n_slots + c)
    }

    fn shape(&self, s: usize) -> &[f64] {
        self.rows.row(self.n_slots + COLORS.len() + s)
    }
}

#[derive(Debug, Clone)]
struct Scene {
    /// Per slot: None when empty, or the (color, shape) pair.
    slots: Vec<Option<(usize, usize)>>,
}

impl Scene {
    fn generate(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Scene {
        let k = rng.gen_range(spec.min_occupied..=spec.max_occupied);
        let mut order: Vec<usize> = (0..spec.n_slots).collect();
        order.shuffle(rng);
        let mut slots = vec![None; spec.n_slots];
        for &loc in order.iter().take(k) {
            let color = rng.gen_range(0..COLORS.len());
            let shape = rng.gen_range(0..SHAPES.len());
            slots[loc] = Some((color, shape));
        }
        Scene { slots }
    }

    /// One feature row per occupied slot, ordered by location: each object
    /// contributes its location, color, and shape codes plus noise. Empty
    /// locations contribute nothing, so their absence is itself the signal.
    fn features(&self, spec: &DatasetSpec, codes: &Codebook, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(loc, slot)| slot.map(|pair| (loc, pair)))
            .map(|(loc, (color, shape))| {
                let mut row: Vec<f64> = codes.location(loc).to_vec();
                for (r, (c, s)) in row
                    .iter_mut()
                    .zip(codes.color(color).iter().zip(codes.shape(shape)))
                {
                    *r += c + s;
                }
                for r in row.iter_mut() {
                    // drawn even at sigma = 0 to keep the rng stream aligned
                    // across sigma settings
                    let noise: f64 =
                        rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                    *r += spec.noise_sigma * noise;
                }
                row
            })
            .collect()
    }

    /// Feature row index of a location, when occupied.
    fn row_of(&self, loc: usize) -> Option<usize> {
        if self.slots[loc].is_none() {
            return None;
        }
        Some(
            self.slots[..loc]
                .iter()
                .filter(|s| s.is_some())
                .count(),
        )
    }

    fn empty_slots(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_none())
            .map(|(i, _)| i)
            .collect()
    }

    fn occupied_slots(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_some())
            .map(|(i, _)| i)
            .collect()
    }

}

fn attribute_question(
    vocab: &Vocab,
    qtype: QType,
    scene: &Scene,
    scene_id: u64,
    rng: &mut ChaCha8Rng,
) -> Sample {
    // 1/5 empty target balances the answer over {4 attributes, none}
    let empties = scene.empty_slots();
    let occupied = scene.occupied_slots();
    let ask_empty = rng.gen_bool(0.2);
    let loc = if ask_empty {
        empties[rng.gen_range(0..empties.len())]
    } else {
        occupied[rng.gen_range(0..occupied.len())]
    };
    let kind_word = match qtype {
        QType::ColorAt => "color",
        QType::ShapeAt => "shape",
        QType::Exists => unreachable!(),
    };
    let question = vec![
        vocab.id("what").unwrap(),
        vocab.id(kind_word).unwrap(),
        vocab.id("at").unwrap(),
        vocab.loc(loc),
        vocab.id("?").unwrap(),
        vocab.ans(),
    ];
    let answer = match scene.slots[loc] {
        None => vocab.none(),
        Some((color, shape)) => match qtype {
            QType::ColorAt => vocab.color(color),
            QType::ShapeAt => vocab.shape(shape),
            QType::Exists => unreachable!(),
        },
    };
    Sample {
        features: Vec::new(),
        question,
        answer,
        meta: SampleMeta {
            scene_id,
            qtype,
            location: Some(loc),
            color: None,
            shape: None,
            slot_row: scene.row_of(loc),
        },
    }
}

/// Existence of an object at a queried location. A fair coin picks an
/// occupied or an empty slot, so yes/no answers are exactly balanced.
fn exists_question(vocab: &Vocab, scene: &Scene, scene_id: u64, rng: &mut ChaCha8Rng) -> Sample {
    let want_present = rng.gen_bool(0.5);
    let pool = if want_present {
        scene.occupied_slots()
    } else {
        scene.empty_slots()
    };
    let loc = pool[rng.gen_range(0..pool.len())];
    let question = vec![
        vocab.id("is").unwrap(),
        vocab.id("there").unwrap(),
        vocab.id("at").unwrap(),
        vocab.loc(loc),
        vocab.id("?").unwrap(),
        vocab.ans(),
    ];
    Sample {
        features: Vec::new(),
        question,
        answer: if want_present { vocab.yes() } else { vocab.no() },
        meta: SampleMeta {
            scene_id,
            qtype: QType::Exists,
            location: Some(loc),
            color: None,
            shape: None,
            slot_row: scene.row_of(loc),
        },
    }
}

/// Deterministic dataset generation: scenes, features, and one question of
/// each type per scene. Splits are disjoint by scene.
pub fn gen_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let vocab = Vocab::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes = Codebook::generate(spec, &mut rng);

    let n_train = ((spec.n_scenes as f64) * spec.train_frac).floor() as usize;
    let n_val = ((spec.n_scenes as f64) * spec.val_frac).ceil() as usize;
    let mut dataset = Dataset { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for scene_id in 0..spec.n_scenes {
        let scene = Scene::generate(spec, &mut rng);
        let features = scene.features(spec, &codes, &mut rng);
        let mut samples = vec![
            attribute_question(&vocab, QType::ColorAt, &scene, scene_id as u64, &mut rng),
            attribute_question(&vocab, QType::ShapeAt, &scene, scene_id as u64, &mut rng),
            exists_question(&vocab, &scene, scene_id as u64, &mut rng),
        ];
        for s in &mut samples {
            s.features = features.clone();
        }
        let bucket = if scene_id < n_train {
            &mut dataset.train
        } else if scene_id < n_train + n_val {
            &mut dataset.val
        } else {
            &mut dataset.test
        };
        bucket.extend(samples);
    }
    Ok(dataset)
}

pub fn write_jsonl(samples: &[Sample], path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut file, s)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut samples = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line)?;
        if !sample
            .features
            .iter()
            .all(|row| row.iter().all(|v| v.is_finite()))
        {
            return Err(Error::NonFinite("dataset features".into()));
        }
        samples.push(sample);
    }
    Ok(samples)
}
