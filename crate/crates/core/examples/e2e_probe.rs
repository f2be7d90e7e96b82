use ndarray::Axis;
use patchinv_core::data_model::{denormalize_chw, make_synthetic_dataset, normalize};
use patchinv_core::evaluation::{evaluate, uncertainty_correlation, IdentityTransfer, Scenario};
use patchinv_core::losses::PatchMode;
use patchinv_core::networks::GeneratorModel;
use patchinv_core::training::{Phase, TrainRunConfig, Trainer};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let total: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(400);
    let lambda: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    let width: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(8);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(11);
    let mode = if args.get(5).map(|s| s == "PI").unwrap_or(false) {
        PatchMode::PI
    } else {
        PatchMode::UAPI
    };
    let data = make_synthetic_dataset(7, 256, 64).unwrap();
    let eval_subset: Vec<_> = data.eval_pairs.iter().take(32).cloned().collect();
    let clean = [Scenario::clean(0)];
    let id_report = evaluate(&IdentityTransfer, &eval_subset, &clean, false).unwrap();
    println!(
        "identity baseline ssim={:.4} psnr={:.2}",
        id_report.rows[0].ssim_mean, id_report.rows[0].psnr_mean
    );
    // dataset statistics
    let stat = |img: &ndarray::Array3<f32>| {
        let n = img.len() as f64;
        let mean = img.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = img.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (xm, xs) = stat(&data.inputs[0].pixels);
    let (ym, ys) = stat(&data.targets[0].pixels);
    println!("x0 mean={xm:.1} std={xs:.1}   y0 mean={ym:.1} std={ys:.1}");

    let cfg = TrainRunConfig {
        mode,
        generator_updates_total: total,
        patch_weight: lambda,
        generator_width: width,
        critic_width: width,
        seed,
        ..TrainRunConfig::default()
    };
    let mut t = Trainer::new(cfg, &data).unwrap();
    let t0 = Instant::now();
    let chunk = 50;
    let mut done = 0;
    while done < total {
        let next = (done + chunk).min(total);
        while (t.generator_steps as usize) < next {
            for _ in 0..t.config.critic_steps_per_cycle {
                t.critic_step(&data).unwrap();
            }
            t.generator_step(&data).unwrap();
        }
        done = next;
        let report = evaluate(&t.generator, &eval_subset, &clean, true).unwrap();
        let unc = uncertainty_correlation(&t.generator, &eval_subset, 32, 0).unwrap();
        let gen_rec = t.records.iter().rev().find(|r| r.phase == Phase::Generator).unwrap().clone();
        let cri_rec = t.records.iter().rev().find(|r| r.phase == Phase::Critic).unwrap().clone();
        // prediction stats on one eval image
        let x0 = normalize(&eval_subset[0].0).unwrap();
        let out = t.generator.forward(&x0.to_chw().insert_axis(Axis(0)));
        let pred = denormalize_chw(&out.image.index_axis(Axis(0), 0).to_owned());
        let n = pred.len() as f64;
        let pm = pred.iter().map(|&v| v as f64).sum::<f64>() / n;
        let ps = (pred.iter().map(|&v| (v as f64 - pm).powi(2)).sum::<f64>() / n).sqrt();
        let (gm, gs) = stat(&eval_subset[0].1.pixels);
        let sig_mean = out.scale.iter().map(|&v| v as f64).sum::<f64>() / out.scale.len() as f64;
        println!(
            "step {done}: ssim={:.4} psnr={:.2} pcc={:.3} | gen: adv={:.2}/{:.2} patch={:.4} | cri: advF={:.3} advP={:.3} pen={:.4} | pred m={pm:.0} s={ps:.0} gt m={gm:.0} s={gs:.0} sig={sig_mean:.3} [{:.0}s]",
            report.rows[0].ssim_mean,
            report.rows[0].psnr_mean,
            unc.pcc,
            gen_rec.adversarial_full,
            gen_rec.adversarial_patch,
            gen_rec.patch_term,
            cri_rec.adversarial_full,
            cri_rec.adversarial_patch,
            cri_rec.penalty_term,
            t0.elapsed().as_secs_f64()
        );
    }
}
