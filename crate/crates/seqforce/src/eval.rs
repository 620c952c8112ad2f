//! Metrics, prediction traces, and attention-map export.

use crate::attention::ensemble_average;
use crate::data::{denormalize_force, RecordingSet};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::window_frames;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn rmse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok((pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        / pred.len() as f64)
        .sqrt())
}

fn check_pair(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!(
            "{} predictions but {} targets",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Improvement of a model over a baseline, as the integer percentage
/// round(100 * baseline_mae / model_mae); the baseline scores 100 against
/// itself.
pub fn improvement_ratio(baseline_mae: f64, model_mae: f64) -> Result<u32> {
    if !(baseline_mae > 0.0) || !(model_mae > 0.0) {
        return Err(Error::Contract(format!(
            "improvement ratio needs positive errors, got {baseline_mae} and {model_mae}"
        )));
    }
    Ok((100.0 * baseline_mae / model_mae).round() as u32)
}

/// Per-bin error for one 1 N force interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    /// Lower edge in newtons; the last bin (10) is open above.
    pub bin: u32,
    pub count: usize,
    pub mae: f64,
}

/// MAE split into eleven 1 N bins by ground-truth magnitude
/// (floor(gt), clamped to the 10 N bin). Empty bins are absent.
pub fn binned_mae(pred: &[f64], gt: &[f64]) -> Result<Vec<BinReport>> {
    check_pair(pred, gt)?;
    let mut sums = [0.0f64; 11];
    let mut counts = [0usize; 11];
    for (p, g) in pred.iter().zip(gt) {
        let bin = (g.floor().max(0.0) as usize).min(10);
        sums[bin] += (p - g).abs();
        counts[bin] += 1;
    }
    Ok((0..11)
        .filter(|&b| counts[b] > 0)
        .map(|b| BinReport {
            bin: b as u32,
            count: counts[b],
            mae: sums[b] / counts[b] as f64,
        })
        .collect())
}

/// Force predictions for every frame of a recording, from stride-1 sliding
/// windows ending at each frame (early windows repeat the first frame).
/// Returned in normalized units.
pub fn predict_trace(model: &Model, set: &RecordingSet, window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::Contract("window must be positive".into()));
    }
    (0..set.frames.len())
        .map(|end| model.predict_window(&window_frames(set, end, window)))
        .collect()
}

/// Trace of the two-model ensemble: the mean of the spatial and channel
/// attention models' predictions at each frame.
pub fn predict_trace_ensemble(
    spatial: &Model,
    channel: &Model,
    set: &RecordingSet,
    window: usize,
) -> Result<Vec<f64>> {
    let a = predict_trace(spatial, set, window)?;
    let b = predict_trace(channel, set, window)?;
    ensemble_average(&a, &b)
}

/// Evaluation summary over a collection of recording sets, in both newton
/// and normalized force units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub sets: usize,
    pub frames: usize,
    pub mae_newtons: f64,
    pub rmse_newtons: f64,
    pub mae_normalized: f64,
    pub rmse_normalized: f64,
    pub bins: Vec<BinReport>,
}

/// Run the model over every set and summarize the error.
pub fn evaluate(model: &Model, sets: &[RecordingSet], window: usize) -> Result<MetricsReport> {
    let mut pred_n = Vec::new();
    let mut gt_n = Vec::new();
    for set in sets {
        let trace = predict_trace(model, set, window)?;
        pred_n.extend(trace.iter().map(|&p| denormalize_force(p)));
        gt_n.extend_from_slice(&set.forces);
    }
    report(model.config.variant.to_string(), sets.len(), &pred_n, &gt_n)
}

/// Summarize newton-scale predictions against newton-scale ground truth.
pub fn report(
    variant: String,
    n_sets: usize,
    pred_newtons: &[f64],
    gt_newtons: &[f64],
) -> Result<MetricsReport> {
    let pred_norm: Vec<f64> = pred_newtons.iter().map(|&p| p / crate::data::MAX_FORCE_NEWTONS).collect();
    let gt_norm: Vec<f64> = gt_newtons.iter().map(|&g| g / crate::data::MAX_FORCE_NEWTONS).collect();
    Ok(MetricsReport {
        variant,
        sets: n_sets,
        frames: pred_newtons.len(),
        mae_newtons: mae(pred_newtons, gt_newtons)?,
        rmse_newtons: rmse(pred_newtons, gt_newtons)?,
        mae_normalized: mae(&pred_norm, &gt_norm)?,
        rmse_normalized: rmse(&pred_norm, &gt_norm)?,
        bins: binned_mae(pred_newtons, gt_newtons)?,
    })
}

/// Write the spatial attention map of every frame of a recording as CSV
/// matrices (`attn_00000.csv`, ...), one row per map row. Only the spatial
/// attention variant has such maps.
pub fn export_attention_maps(
    model: &Model,
    set: &RecordingSet,
    window: usize,
    out_dir: &Path,
) -> Result<usize> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(format!("creating {}: {e}", out_dir.display())))?;
    for end in 0..set.frames.len() {
        let frames = window_frames(set, end, window);
        let maps = model.attention_maps(&frames)?;
        let map = maps.last().unwrap();
        let (h, w, _) = map.dims3()?;
        let mut text = String::new();
        for i in 0..h {
            let row: Vec<String> = (0..w).map(|j| format!("{}", map.at3(i, j, 0))).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        let path = out_dir.join(format!("attn_{end:05}.csv"));
        std::fs::write(&path, text)
            .map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))?;
    }
    Ok(set.frames.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::{render_frame, Condition, ObjectKind};
    use crate::model::{ModelConfig, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mae_rmse_hand_cases() {
        let pred = [1.0, 2.0, 4.0];
        let gt = [1.0, 4.0, 1.0];
        assert!((mae(&pred, &gt).unwrap() - 5.0 / 3.0).abs() < 1e-15);
        assert!((rmse(&pred, &gt).unwrap() - (13.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        // rmse >= mae always (Jensen)
        assert!(rmse(&pred, &gt).unwrap() >= mae(&pred, &gt).unwrap());
    }

    #[test]
    fn improvement_ratio_reference_cases() {
        // the six attention rows against the 0.04051 baseline
        let b = 0.04051;
        for (m, want) in [
            (0.03700, 109),
            (0.03662, 111),
            (0.03400, 119),
            (0.03416, 119),
            (0.03320, 122),
            (0.03183, 127),
        ] {
            assert_eq!(improvement_ratio(b, m).unwrap(), want, "mae {m}");
        }
        assert_eq!(improvement_ratio(b, b).unwrap(), 100);
        assert!(improvement_ratio(0.0, 1.0).is_err());
    }

    #[test]
    fn binned_mae_recombines_to_global() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        let gt: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..12.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g + rng.gen_range(-0.5..0.5)).collect();
        let bins = binned_mae(&pred, &gt).unwrap();
        let total: usize = bins.iter().map(|b| b.count).sum();
        assert_eq!(total, 500);
        let weighted: f64 =
            bins.iter().map(|b| b.mae * b.count as f64).sum::<f64>() / total as f64;
        assert!((weighted - mae(&pred, &gt).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn binned_mae_clamps_above_ten() {
        let bins = binned_mae(&[11.0, 12.0, 0.4], &[11.5, 10.2, 0.5]).unwrap();
        assert_eq!(bins.len(), 2);
        assert_eq!(bins[0].bin, 0);
        assert_eq!(bins[0].count, 1);
        assert_eq!(bins[1].bin, 10);
        assert_eq!(bins[1].count, 2);
    }

    fn toy_set(frames: usize) -> RecordingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let forces: Vec<f64> = (0..frames).map(|i| 6.0 + 5.0 * (i as f64 * 0.5).sin()).collect();
        RecordingSet {
            condition: Condition {
                object: ObjectKind::Sponge,
                angle_deg: 0,
                lux: 350,
            },
            name: "toy".into(),
            frames: forces.iter().map(|&f| render_frame(16, f, 0.0, &mut rng)).collect(),
            forces,
        }
    }

    fn tiny_model(variant: Variant, seed: u64) -> Model {
        Model::init(
            &ModelConfig {
                variant,
                backbone: BackboneConfig::tiny16(),
                hidden_size: 8,
                fc_size: 8,
                k: 2,
                r: 4,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn trace_has_one_prediction_per_frame() {
        let set = toy_set(7);
        let model = tiny_model(Variant::Baseline, 1);
        let trace = predict_trace(&model, &set, 3).unwrap();
        assert_eq!(trace.len(), 7);
        assert!(trace.iter().all(|p| p.is_finite()));
        // frame 0's window is all first-frame, so it must equal a direct
        // prediction on a constant window
        let direct = model
            .predict_window(&vec![set.frames[0].clone(); 3])
            .unwrap();
        assert_eq!(trace[0].to_bits(), direct.to_bits());
    }

    #[test]
    fn ensemble_trace_is_midpoint() {
        let set = toy_set(5);
        let a = tiny_model(Variant::Ssam, 2);
        let b = tiny_model(Variant::Scam, 3);
        let ta = predict_trace(&a, &set, 2).unwrap();
        let tb = predict_trace(&b, &set, 2).unwrap();
        let te = predict_trace_ensemble(&a, &b, &set, 2).unwrap();
        for i in 0..5 {
            assert!((te[i] - 0.5 * (ta[i] + tb[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn evaluate_produces_consistent_report() {
        let set = toy_set(6);
        let model = tiny_model(Variant::Baseline, 4);
        let rep = evaluate(&model, &[set.clone()], 2).unwrap();
        assert_eq!(rep.frames, 6);
        assert_eq!(rep.sets, 1);
        assert_eq!(rep.variant, "baseline");
        assert!((rep.mae_newtons / rep.mae_normalized - 12.0).abs() < 1e-9);
        assert!((rep.rmse_newtons / rep.rmse_normalized - 12.0).abs() < 1e-9);
        assert!(rep.rmse_newtons >= rep.mae_newtons);
        let total: usize = rep.bins.iter().map(|b| b.count).sum();
        assert_eq!(total, 6);
        // report round-trips through JSON
        let json = serde_json::to_string(&rep).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.frames, rep.frames);
        assert_eq!(back.mae_newtons, rep.mae_newtons);
        assert_eq!(back.bins.len(), rep.bins.len());
        for (a, b) in back.bins.iter().zip(&rep.bins) {
            assert_eq!(a.bin, b.bin);
            assert_eq!(a.count, b.count);
            assert!((a.mae - b.mae).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_map_export_writes_csv_in_unit_interval() {
        let set = toy_set(4);
        let model = tiny_model(Variant::Ssam, 5);
        let dir = tempfile::tempdir().unwrap();
        let n = export_attention_maps(&model, &set, 2, dir.path()).unwrap();
        assert_eq!(n, 4);
        for end in 0..4 {
            let text =
                std::fs::read_to_string(dir.path().join(format!("attn_{end:05}.csv"))).unwrap();
            let rows: Vec<&str> = text.lines().collect();
            assert_eq!(rows.len(), 1); // tiny backbone: 1x1 map
            for v in rows[0].split(',') {
                let v: f64 = v.parse().unwrap();
                assert!(v > 0.0 && v < 1.0);
            }
        }
        let baseline = tiny_model(Variant::Baseline, 5);
        assert!(export_attention_maps(&baseline, &set, 2, dir.path()).is_err());
    }
}
