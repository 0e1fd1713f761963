//! Synthetic facades with known floor structure.
//!
//! Buildings are drawn in pixel space: a ground line near the bottom of the
//! image, floors stacked upward at a roughly constant pitch, a grid of
//! windows per floor and optional doors on the ground floor. Every box
//! carries its true floor id (0 = ground floor).

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facade::{Category, DetectionBox, FacadeRecord};
use crate::rng::{substream, StreamRng};

/// Largest jitter (as a fraction of pitch) allowed in regular mode; keeps
/// the floor pitch at least four times the intra-floor spread.
pub const MAX_REGULAR_JITTER: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Inclusive floor-count range.
    pub floors: (u32, u32),
    /// Inclusive column-count range.
    pub columns: (u32, u32),
    pub width: u32,
    pub height: u32,
    /// Width of the uniform band of window y-offsets, as a fraction of pitch.
    pub jitter: f64,
    /// Per-element deletion probability.
    pub dropout: f64,
    /// Mezzanines and whole-floor deletions.
    pub irregular: bool,
    /// Probability that a ground-floor column holds a door.
    pub door_prob: f64,
    /// Floor pitch range as a fraction of image height.
    pub pitch: (f64, f64),
    /// Ground-line range as a fraction of image height.
    pub ground: (f64, f64),
    /// Irregular mode: probability of one half-pitch floor.
    pub mezzanine_prob: f64,
    /// Irregular mode: probability of deleting one whole floor.
    pub missing_floor_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            floors: (2, 8),
            columns: (2, 6),
            width: 800,
            height: 1200,
            jitter: 0.08,
            dropout: 0.1,
            irregular: false,
            door_prob: 0.3,
            pitch: (0.092, 0.1125),
            ground: (0.935, 0.975),
            mezzanine_prob: 0.5,
            missing_floor_prob: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.floors.0 == 0 || self.floors.0 > self.floors.1 {
            return bad(format!("floor range {:?} is empty or starts at 0", self.floors));
        }
        if self.columns.0 == 0 || self.columns.0 > self.columns.1 {
            return bad(format!("column range {:?} is empty or starts at 0", self.columns));
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.dropout) || !(0.0..=1.0).contains(&self.door_prob) {
            return bad("dropout and door probability must lie in [0, 1]".into());
        }
        if !(self.jitter >= 0.0 && self.jitter < 1.0) {
            return bad(format!("jitter {} outside [0, 1)", self.jitter));
        }
        if !self.irregular {
            if self.jitter > MAX_REGULAR_JITTER {
                return bad(format!(
                    "jitter {} too large for regular mode (max {MAX_REGULAR_JITTER}; floors would not stay separable)",
                    self.jitter
                ));
            }
            if self.dropout >= 1.0 {
                return bad("dropout 1.0 would delete whole floors; not allowed in regular mode".into());
            }
        }
        let ok_range = |r: (f64, f64)| r.0 > 0.0 && r.0 <= r.1 && r.1 <= 1.0;
        if !ok_range(self.pitch) || !ok_range(self.ground) {
            return bad("pitch and ground ranges must be increasing fractions in (0, 1]".into());
        }
        Ok(())
    }
}

/// `n` facades, fully determined by `config.seed`.
pub fn generate(config: &SynthConfig, n: usize) -> Result<Vec<FacadeRecord>> {
    config.validate()?;
    let mut rng = substream(config.seed, "synth");
    Ok((0..n)
        .map(|i| one_facade(config, &mut rng, format!("synth-{}-{i:05}", config.seed)))
        .collect())
}

fn one_facade(cfg: &SynthConfig, rng: &mut StreamRng, facade_id: String) -> FacadeRecord {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let floors = rng.random_range(cfg.floors.0..=cfg.floors.1);
    let columns = rng.random_range(cfg.columns.0..=cfg.columns.1) as usize;
    let ground = rng.random_range(cfg.ground.0..=cfg.ground.1) * h;
    let mut pitch = rng.random_range(cfg.pitch.0..=cfg.pitch.1) * h;
    let facade_w = rng.random_range(0.6..=0.9) * w;
    let x0 = rng.random_range(0.0..=(w - facade_w));
    let col_spacing = facade_w / columns as f64;

    let mezzanine = (cfg.irregular && floors >= 2 && rng.random_bool(cfg.mezzanine_prob))
        .then(|| rng.random_range(1..floors));
    let missing = (cfg.irregular && floors >= 2 && rng.random_bool(cfg.missing_floor_prob))
        .then(|| rng.random_range(0..floors));

    let pitches: Vec<f64> = (0..floors)
        .map(|f| if Some(f) == mezzanine { 0.5 } else { 1.0 })
        .collect();
    let total: f64 = pitches.iter().sum();
    // keep a small top margin however many floors were drawn
    pitch = pitch.min((ground - 0.02 * h) / total);

    let mut boxes = Vec::new();
    let mut base = ground;
    for f in 0..floors {
        let p = pitch * pitches[f as usize];
        let mut row = Vec::with_capacity(columns);
        for c in 0..columns {
            let cx = x0 + (c as f64 + 0.5) * col_spacing;
            let door = f == 0 && rng.random_bool(cfg.door_prob);
            let (bw, bh, cy, category) = if door {
                let bh = 0.8 * p;
                (bh / 2.0, bh, base - 0.4 * p, Category::Door)
            } else {
                let bh = 0.45 * p;
                let offset = rng.random_range(-0.5..=0.5) * cfg.jitter * p;
                ((0.5 * col_spacing).min(1.2 * bh), bh, base - 0.45 * p + offset, Category::Window)
            };
            let mut b = DetectionBox::new(cx - bw / 2.0, cy - bh / 2.0, bw, bh, category);
            b.floor_id = Some(f);
            row.push(b);
        }
        base -= p;
        if Some(f) == missing {
            continue;
        }
        let mut kept: Vec<DetectionBox> = row.iter().filter(|_| !rng.random_bool(cfg.dropout)).cloned().collect();
        if kept.is_empty() && !cfg.irregular {
            kept.push(row.choose(rng).expect("at least one column").clone());
        }
        boxes.extend(kept);
    }
    FacadeRecord {
        facade_id,
        width: cfg.width,
        height: cfg.height,
        boxes,
        floor_count: Some(floors),
    }
}

/// Unstructured 800x1200 facade: `n` random boxes scattered around one to
/// three rough rows. No floor truth.
pub fn scatter(n: usize, seed: u64) -> FacadeRecord {
    let mut rng = substream(seed, "scatter");
    let rows = rng.random_range(1..=n.clamp(1, 3));
    let row_y: Vec<f64> = (0..rows).map(|_| rng.random_range(100.0..1100.0)).collect();
    let boxes = (0..n)
        .map(|_| {
            let cy = row_y[rng.random_range(0..rows)] + rng.random_range(-15.0..15.0);
            let (w, h) = (rng.random_range(20.0..80.0), rng.random_range(20.0..80.0));
            let category = if rng.random_bool(0.8) { Category::Window } else { Category::Door };
            DetectionBox::new(rng.random_range(20.0..700.0), cy - h / 2.0, w, h, category)
        })
        .collect();
    FacadeRecord {
        facade_id: format!("scatter-{seed}"),
        width: 800,
        height: 1200,
        boxes,
        floor_count: None,
    }
}

/// A copy of `record` without any box of floor `floor`; the ground-truth
/// floor count is kept, so the result is a missing-floor failure case.
pub fn delete_floor(record: &FacadeRecord, floor: u32) -> FacadeRecord {
    FacadeRecord {
        boxes: record.boxes.iter().filter(|b| b.floor_id != Some(floor)).cloned().collect(),
        ..record.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facade::write_facades;
    use crate::graph::{build_graph, pseudo_labels, GraphConfig};

    #[test]
    fn exact_three_by_two() {
        let cfg = SynthConfig {
            floors: (3, 3),
            columns: (2, 2),
            jitter: 0.0,
            dropout: 0.0,
            door_prob: 0.0,
            ..Default::default()
        };
        let recs = generate(&cfg, 5).unwrap();
        for r in &recs {
            assert_eq!(r.boxes.len(), 6);
            let mut ys: Vec<f64> = r.boxes.iter().map(|b| b.center().1).collect();
            ys.sort_by(f64::total_cmp);
            ys.dedup();
            assert_eq!(ys.len(), 3);
            let g = build_graph(r, &GraphConfig::default()).unwrap();
            assert_eq!(pseudo_labels(&g).count, 3);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig {
            seed: 42,
            ..Default::default()
        };
        let bytes = |recs: Vec<FacadeRecord>| {
            let mut out = Vec::new();
            write_facades(&mut out, &recs).unwrap();
            out
        };
        assert_eq!(bytes(generate(&cfg, 20).unwrap()), bytes(generate(&cfg, 20).unwrap()));
        let other = SynthConfig { seed: 43, ..cfg.clone() };
        assert_ne!(bytes(generate(&cfg, 20).unwrap()), bytes(generate(&other, 20).unwrap()));
    }

    #[test]
    fn regular_pseudo_counts_match_truth() {
        let recs = generate(&SynthConfig { seed: 11, ..Default::default() }, 500).unwrap();
        for r in &recs {
            let g = build_graph(r, &GraphConfig::default()).unwrap();
            assert_eq!(Some(pseudo_labels(&g).count as u32), r.floor_count, "{}", r.facade_id);
        }
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let full_dropout = SynthConfig {
            dropout: 1.0,
            ..Default::default()
        };
        assert!(generate(&full_dropout, 1).is_err());
        let wide = SynthConfig {
            jitter: 0.5,
            ..Default::default()
        };
        assert!(generate(&wide, 1).is_err());
        assert!(generate(&SynthConfig { irregular: true, dropout: 1.0, ..Default::default() }, 1).is_ok());
    }

    #[test]
    fn regular_mode_keeps_every_floor_and_the_frame() {
        let recs = generate(&SynthConfig { seed: 3, ..Default::default() }, 200).unwrap();
        for r in &recs {
            let floors = r.floor_count.unwrap();
            for f in 0..floors {
                assert!(r.boxes.iter().any(|b| b.floor_id == Some(f)), "{} lost floor {f}", r.facade_id);
            }
            for b in &r.boxes {
                assert!(b.x >= 0.0 && b.y >= 0.0);
                assert!(b.x + b.w <= r.width as f64 && b.y + b.h <= r.height as f64);
            }
        }
    }

    #[test]
    fn doors_are_tall() {
        let recs = generate(&SynthConfig { door_prob: 1.0, seed: 1, ..Default::default() }, 10).unwrap();
        let doors: Vec<_> = recs.iter().flat_map(|r| &r.boxes).filter(|b| b.category == Category::Door).collect();
        assert!(!doors.is_empty());
        for d in doors {
            assert!((d.h - 2.0 * d.w).abs() < 1e-9);
            assert_eq!(d.floor_id, Some(0));
        }
    }

    #[test]
    fn delete_floor_keeps_truth() {
        let r = &generate(&SynthConfig::default(), 1).unwrap()[0];
        let d = delete_floor(r, 0);
        assert_eq!(d.floor_count, r.floor_count);
        assert!(d.boxes.iter().all(|b| b.floor_id != Some(0)));
    }
}
