//! Component ablation: retrain the conditional pathway with the temporal
//! branch and cross-frame attention toggled off in all four combinations,
//! holding the seed and dataset fixed, then score every variant on the same
//! held-out clips.

use std::fmt::Write as _;

use crate::data::Clip;
use crate::error::Result;

use super::eval::{evaluate, EvalReport};
use super::train::{train, TrainConfig};
use super::Checkpoint;

/// One trained-and-scored variant of the model.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: &'static str,
    pub no_temporal: bool,
    pub no_xattn: bool,
    /// Scalars that received a gradient at the first training step.
    pub trained_scalars: usize,
    /// Fingerprint of the training set the row was produced from.
    pub dataset_hash: u64,
    pub final_loss: f64,
    pub report: EvalReport,
}

/// FNV-1a over every clip's dimensions and frame bytes, in dataset order.
/// Equal hashes across ablation rows certify they saw identical data.
pub fn dataset_hash(clips: &[Clip]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    for clip in clips {
        for d in clip.frames.shape() {
            eat(&(*d as u64).to_le_bytes());
        }
        for &v in clip.frames.iter() {
            eat(&v.to_le_bytes());
        }
    }
    h
}

/// The four rows of the component grid, in fixed order.
const VARIANTS: [(&str, bool, bool); 4] = [
    ("spatial only", true, true),
    ("+ cross-frame attention", true, false),
    ("+ temporal features", false, true),
    ("full model", false, false),
];

/// Train and evaluate all four variants with one seed and one dataset.
/// `cfg.no_temporal` / `cfg.no_xattn` are overridden per row.
pub fn ablate(
    cfg: &TrainConfig,
    ae_ckpt: &Checkpoint,
    train_set: &[Clip],
    held_out: &[Clip],
    eval_steps: usize,
    threads: usize,
) -> Result<Vec<AblationRow>> {
    let hash = dataset_hash(train_set);
    let mut rows = Vec::with_capacity(VARIANTS.len());
    for (label, no_temporal, no_xattn) in VARIANTS {
        let mut run = cfg.clone();
        run.no_temporal = no_temporal;
        run.no_xattn = no_xattn;
        let outcome = train(&run, ae_ckpt, train_set)?;
        let final_loss = outcome.curve.last().map_or(f64::NAN, |&(_, l)| l);
        let report = evaluate(&outcome.checkpoint, held_out, eval_steps, cfg.seed, threads)?;
        rows.push(AblationRow {
            label,
            no_temporal,
            no_xattn,
            trained_scalars: outcome.trained_scalars,
            dataset_hash: hash,
            final_loss,
            report,
        });
    }
    Ok(rows)
}

/// Render rows as an aligned text table with the shared dataset hash on top.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    if let Some(first) = rows.first() {
        let _ = writeln!(out, "dataset {:016x}", first.dataset_hash);
    }
    let _ = writeln!(
        out,
        "{:<26} {:>8} {:>6} {:>9} {:>11} {:>8} {:>7} {:>11}",
        "variant", "temporal", "xattn", "trained", "final loss", "psnr", "ssim", "blend psnr"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<26} {:>8} {:>6} {:>9} {:>11.6} {:>8.2} {:>7.3} {:>11.2}",
            r.label,
            if r.no_temporal { "no" } else { "yes" },
            if r.no_xattn { "no" } else { "yes" },
            r.trained_scalars,
            r.final_loss,
            r.report.mean.model.psnr,
            r.report.mean.model.ssim,
            r.report.mean.linear_blend.psnr,
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_clip, SceneConfig};
    use crate::diffusion::NoiseSchedule;
    use crate::nn::ParamStore;
    use crate::pipeline::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_clips(count: usize, seed0: u64) -> Vec<Clip> {
        (0..count)
            .map(|i| gen_clip(&SceneConfig::default(), 3, 16, 16, seed0 + i as u64).unwrap())
            .collect()
    }

    fn raw_ae_ckpt(seed: u64) -> Checkpoint {
        let model = ModelConfig::tiny();
        let (ae, _, _) = model.build().unwrap();
        let mut params = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ae.init(&mut params, &mut rng);
        let schedule = NoiseSchedule::cosine(model.timesteps).unwrap();
        Checkpoint { model, schedule, params }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            timesteps: 16,
            lr: 1e-3,
            batch: 1,
            steps: 2,
            seed: 0,
            freeze_base: false,
            no_temporal: false,
            no_xattn: false,
            n_frames: 3,
            height: 16,
            width: 16,
        }
    }

    #[test]
    fn the_grid_has_four_distinct_rows_over_one_dataset() {
        let ae = raw_ae_ckpt(1);
        let train_set = toy_clips(2, 10);
        let held_out = toy_clips(1, 20);
        let rows = ablate(&tiny_cfg(), &ae, &train_set, &held_out, 2, 1).unwrap();

        assert_eq!(rows.len(), 4);
        let want = [(true, true), (true, false), (false, true), (false, false)];
        for (row, (nt, nx)) in rows.iter().zip(want) {
            assert_eq!((row.no_temporal, row.no_xattn), (nt, nx), "{}", row.label);
        }
        let hash = dataset_hash(&train_set);
        assert!(rows.iter().all(|r| r.dataset_hash == hash));
        assert!(rows.iter().all(|r| r.final_loss.is_finite()));

        // Census ordering: the spatial-only row trains the fewest scalars,
        // the full model the most, and the two middles are distinct.
        let n: Vec<usize> = rows.iter().map(|r| r.trained_scalars).collect();
        assert!(n[0] < n[1] && n[0] < n[2], "census {n:?}");
        assert!(n[3] > n[1] && n[3] > n[2], "census {n:?}");
        assert_ne!(n[1], n[2], "census {n:?}");

        let table = format_table(&rows);
        for row in &rows {
            assert!(table.contains(row.label), "missing {:?} in\n{table}", row.label);
        }
        assert!(table.contains(&format!("{hash:016x}")));
    }

    #[test]
    fn dataset_hashes_react_to_content_and_order() {
        let clips = toy_clips(2, 30);
        let h = dataset_hash(&clips);
        assert_eq!(h, dataset_hash(&clips));

        let swapped = vec![clips[1].clone(), clips[0].clone()];
        assert_ne!(h, dataset_hash(&swapped));

        let mut poked = clips.clone();
        poked[0].frames[[0, 0, 0, 0]] += 1e-3;
        assert_ne!(h, dataset_hash(&poked));

        assert_ne!(dataset_hash(&clips[..1]), h);
    }
}
