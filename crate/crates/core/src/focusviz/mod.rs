//! Per-annotator focus maps from captured cross-attention, scoring against
//! planted masks, and PGM heatmap export.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::model::{forward, AttentionRecord, ModelParams};
use crate::numkernel::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocusUnit {
    Patch,
    Frame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub unit: FocusUnit,
    pub blocks: usize,
    pub heads: usize,
    /// Number of forward passes averaged into the map.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusMap {
    pub annotator_id: String,
    /// Non-negative, sums to 1; one entry per patch or per frame.
    pub weights: Vec<f64>,
    pub provenance: Provenance,
}

/// Cross-attention row of `annotator` for every block and head,
/// `[block][head][key]`. In sequence mode keys are already summed per frame.
pub fn per_head_focus(record: &AttentionRecord, annotator: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    if record.blocks.is_empty() || record.blocks.iter().any(|b| b.cross_attn.is_empty()) {
        return Err(Error::Contract("record holds no cross-attention".into()));
    }
    let mut out = Vec::with_capacity(record.blocks.len());
    for block in &record.blocks {
        let mut heads = Vec::with_capacity(block.cross_attn.len());
        for head in &block.cross_attn {
            let m = if record.frames.is_some() { record.frame_mass(head)? } else { head.clone() };
            let (rows, _) = m.as_matrix();
            if annotator >= rows {
                return Err(Error::Index(format!("annotator {annotator} of {rows}")));
            }
            heads.push(m.row(annotator).to_vec());
        }
        out.push(heads);
    }
    Ok(out)
}

/// Mean over heads and blocks of the annotator's cross-attention row,
/// renormalised to sum to 1.
pub fn extract_focus(record: &AttentionRecord, annotator: usize, annotator_id: &str) -> Result<FocusMap> {
    let rows = per_head_focus(record, annotator)?;
    let len = rows[0][0].len();
    let mut weights = vec![0.0; len];
    let mut count = 0usize;
    for w in rows.iter().flatten() {
        weights.iter_mut().zip(w).for_each(|(a, b)| *a += b);
        count += 1;
    }
    weights.iter_mut().for_each(|w| *w /= count as f64);
    Ok(FocusMap {
        annotator_id: annotator_id.to_string(),
        weights: normalized(weights)?,
        provenance: Provenance {
            unit: if record.frames.is_some() { FocusUnit::Frame } else { FocusUnit::Patch },
            blocks: rows.len(),
            heads: rows[0].len(),
            samples: 1,
        },
    })
}

fn normalized(mut w: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || w.iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return Err(Error::Contract("focus weights must be non-negative with positive mass".into()));
    }
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

/// Focus maps for every annotator, averaged over `inputs`.
pub fn average_focus<T: Scalar>(
    params: &ModelParams<T>,
    inputs: &[Tensor<T>],
    annotator_ids: &[String],
) -> Result<Vec<FocusMap>> {
    if inputs.is_empty() {
        return Err(Error::Contract("no inputs to average focus over".into()));
    }
    if annotator_ids.len() != params.config.n_annotators {
        return Err(Error::Contract(format!(
            "{} annotator ids for {} annotators",
            annotator_ids.len(),
            params.config.n_annotators
        )));
    }
    let mut sums: Vec<Option<FocusMap>> = vec![None; annotator_ids.len()];
    for x in inputs {
        let (_, record) = forward(x, params)?;
        for (k, id) in annotator_ids.iter().enumerate() {
            let map = extract_focus(&record, k, id)?;
            match &mut sums[k] {
                Some(acc) if acc.weights.len() == map.weights.len() => {
                    acc.weights.iter_mut().zip(&map.weights).for_each(|(a, b)| *a += b);
                    acc.provenance.samples += 1;
                }
                Some(_) => {
                    return Err(Error::dim("average_focus", "inputs differ in patch or frame count"))
                }
                slot @ None => *slot = Some(map),
            }
        }
    }
    sums.into_iter()
        .map(|m| {
            let mut m = m.expect("at least one input");
            m.weights = normalized(std::mem::take(&mut m.weights))?;
            Ok(m)
        })
        .collect()
}

/// Mass inside `mask` divided by the mass a uniform map would put there.
/// 1.0 is no better than uniform.
pub fn focus_recovery_score(map: &FocusMap, mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::Contract("empty mask".into()));
    }
    let n = map.weights.len();
    if let Some(&i) = mask.iter().find(|&&i| i >= n) {
        return Err(Error::Index(format!("mask index {i} outside {n} cells")));
    }
    let total: f64 = map.weights.iter().sum();
    let inside: f64 = mask.iter().map(|&i| map.weights[i]).sum::<f64>() / total;
    Ok(inside / (mask.len() as f64 / n as f64))
}

/// Binary greyscale PGM; each cell is `weight / max weight` scaled to 255.
pub fn encode_pgm(map: &FocusMap, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows * cols != map.weights.len() || rows == 0 {
        return Err(Error::Config(format!(
            "layout {rows}x{cols} does not fit {} weights",
            map.weights.len()
        )));
    }
    let max = map.weights.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(map.weights.iter().map(|w| {
        if max > 0.0 {
            (w / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// Sidecar JSON next to a heatmap file.
pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("json")
}

/// Writes `path` as PGM and the raw map as JSON beside it. Sequence maps use
/// a `1 × T` strip whatever `layout` says.
pub fn export_heatmap(map: &FocusMap, layout: (usize, usize), path: &Path) -> Result<()> {
    let (rows, cols) = match map.provenance.unit {
        FocusUnit::Frame => (1, map.weights.len()),
        FocusUnit::Patch => layout,
    };
    fsio::write(path, &encode_pgm(map, rows, cols)?)?;
    fsio::write_json(&sidecar_path(path), map)
}

pub fn load_sidecar(path: &Path) -> Result<FocusMap> {
    fsio::read_json(path)
}

/// Most nearly square `rows × cols` factorisation of `n`, rows ≤ cols.
pub fn grid_layout(n: usize) -> (usize, usize) {
    let mut rows = (n as f64).sqrt() as usize;
    while rows > 1 && !n.is_multiple_of(rows) {
        rows -= 1;
    }
    let rows = rows.max(1);
    (rows, n / rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockAttention, FrameLayout};
    use proptest::prelude::*;

    fn record(heads: Vec<Vec<Vec<f64>>>, frames: Option<FrameLayout>) -> AttentionRecord {
        // heads: [block*head][row][key], one block per entry pair of 2 heads.
        let blocks = heads
            .chunks(2)
            .map(|hs| BlockAttention {
                self_attn: vec![],
                cross_attn: hs
                    .iter()
                    .map(|rows| {
                        let cols = rows[0].len();
                        Tensor::new(&[rows.len(), cols], rows.concat()).unwrap()
                    })
                    .collect(),
            })
            .collect();
        AttentionRecord { blocks, frames }
    }

    fn map(w: Vec<f64>) -> FocusMap {
        FocusMap {
            annotator_id: "A1".into(),
            weights: w,
            provenance: Provenance { unit: FocusUnit::Patch, blocks: 1, heads: 1, samples: 1 },
        }
    }

    #[test]
    fn single_patch_is_all_mass() {
        let r = record(vec![vec![vec![1.0]], vec![vec![1.0]]], None);
        assert_eq!(extract_focus(&r, 0, "A1").unwrap().weights, vec![1.0]);
    }

    #[test]
    fn hand_averaged_heads_and_blocks() {
        let r = record(
            vec![
                vec![vec![0.5, 0.5, 0.0, 0.0], vec![0.25; 4]],
                vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.25; 4]],
                vec![vec![0.0, 0.0, 0.5, 0.5], vec![0.25; 4]],
                vec![vec![0.0, 0.0, 0.0, 1.0], vec![0.25; 4]],
            ],
            None,
        );
        let m = extract_focus(&r, 0, "A1").unwrap();
        assert_eq!(m.weights, vec![0.375, 0.125, 0.125, 0.375]);
        assert_eq!((m.provenance.blocks, m.provenance.heads), (2, 2));
        assert_eq!(extract_focus(&r, 1, "A2").unwrap().weights, vec![0.25; 4]);
        assert!(matches!(extract_focus(&r, 2, "A3"), Err(Error::Index(_))));
    }

    #[test]
    fn sequence_mode_sums_frame_keys() {
        let frames = Some(FrameLayout { n_frames: 2, keys_per_frame: 2 });
        let r = record(vec![vec![vec![0.1, 0.2, 0.3, 0.4]], vec![vec![0.3, 0.2, 0.1, 0.4]]], frames);
        let m = extract_focus(&r, 0, "A1").unwrap();
        assert_eq!(m.provenance.unit, FocusUnit::Frame);
        assert!((m.weights[0] - 0.4).abs() < 1e-12 && (m.weights[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn recovery_score_examples() {
        assert_eq!(focus_recovery_score(&map(vec![0.125; 8]), &[1, 5]).unwrap(), 1.0);
        let mut w = vec![0.0; 8];
        w[2] = 0.5;
        w[3] = 0.5;
        assert_eq!(focus_recovery_score(&map(w), &[2, 3]).unwrap(), 4.0);
        assert!(matches!(focus_recovery_score(&map(vec![1.0]), &[]), Err(Error::Contract(_))));
        assert!(matches!(focus_recovery_score(&map(vec![1.0]), &[1]), Err(Error::Index(_))));
    }

    #[test]
    fn pgm_examples() {
        let bytes = encode_pgm(&map(vec![0.25; 4]), 2, 2).unwrap();
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[11..], &[255; 4]);
        let bytes = encode_pgm(&map(vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]), 2, 3).unwrap();
        assert_eq!(&bytes[11..], &[0, 255, 0, 0, 0, 0]);
        assert!(matches!(encode_pgm(&map(vec![0.5; 2]), 3, 1), Err(Error::Config(_))));
    }

    #[test]
    fn export_round_trips_and_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = map(vec![0.1, 0.2, 0.3, 0.4]);
        let p = dir.path().join("a.pgm");
        export_heatmap(&m, (2, 2), &p).unwrap();
        assert_eq!(load_sidecar(&sidecar_path(&p)).unwrap(), m);
        let q = dir.path().join("b.pgm");
        export_heatmap(&m, (2, 2), &q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }

    #[test]
    fn layouts() {
        assert_eq!(grid_layout(64), (8, 8));
        assert_eq!(grid_layout(12), (3, 4));
        assert_eq!(grid_layout(7), (1, 7));
    }

    proptest! {
        #[test]
        fn extracted_maps_are_distributions(raw in prop::collection::vec(0.01f64..1.0, 12)) {
            // Two blocks, two heads, one row of three keys each.
            let rows: Vec<Vec<Vec<f64>>> = raw
                .chunks(3)
                .map(|c| {
                    let s: f64 = c.iter().sum();
                    vec![c.iter().map(|x| x / s).collect()]
                })
                .collect();
            let m = extract_focus(&record(rows, None), 0, "A1").unwrap();
            prop_assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(m.weights.iter().all(|w| *w >= 0.0));
        }

        #[test]
        fn score_is_unchanged_by_renormalising(raw in prop::collection::vec(0.0f64..1.0, 8), k in 1usize..8) {
            prop_assume!(raw.iter().sum::<f64>() > 1e-6);
            let base = map(normalized(raw.clone()).unwrap());
            let again = map(normalized(base.weights.clone()).unwrap());
            let mask: Vec<usize> = (0..k).collect();
            let (a, b) = (focus_recovery_score(&base, &mask).unwrap(), focus_recovery_score(&again, &mask).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
