//! Calibration harness: timing and trend measurements at desk scale.

use deweather::data_synth::{
    generate_dataset, load_dataset, mean_abs_diff, SceneSpec, Weather, ALL_INCONSISTENCIES,
};
use deweather::eval::{evaluate, psnr, restored_for_scene, Against};
use deweather::fcm::MatchConfig;
use deweather::models::{BackboneConfig, NormKind};
use deweather::training::{
    train_constructor, train_dew, windows_from_scenes, Constructor, Stage, Supervision,
    TrainConfig,
};
use std::time::Instant;

fn desk_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        seed,
        stage: Stage::Csaclc,
        backbone: BackboneConfig {
            base_channels: 16,
            depth: 2,
            resblocks_per_stage: 1,
            norm: NormKind::Batch,
        },
        match_cfg: MatchConfig {
            s: 2,
            padding: 3,
            k: 3,
            n: 1,
        },
        ..TrainConfig::default()
    }
}

fn make_dataset(dir: &std::path::Path, count: usize, base_seed: u64) {
    let specs: Vec<SceneSpec> = (0..count)
        .map(|i| SceneSpec {
            scene_id: format!("scene_{i:03}"),
            canvas: (32, 32),
            num_frames: 5,
            weather: match i % 3 {
                0 => Weather::Rain,
                1 => Weather::Snow,
                _ => Weather::Fog,
            },
            weather_density: 0.5,
            inconsistency: ALL_INCONSISTENCIES.to_vec(),
            rng_seed: base_seed + i as u64,
        })
        .collect();
    generate_dataset(&specs, dir, 2).unwrap();
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("timing");

    let tmp = std::path::PathBuf::from("/tmp/deweather_calib");
    let train_dir = tmp.join("train");
    let eval_dir = tmp.join("eval");
    if !train_dir.join("manifest.csv").exists() {
        make_dataset(&train_dir, 8, 100);
        make_dataset(&eval_dir, 8, 900);
    }
    let train_scenes = load_dataset(&train_dir).unwrap();
    let eval_scenes = load_dataset(&eval_dir).unwrap();

    match mode {
        "timing" => {
            let out = tmp.join("timing");
            let mut cfg = desk_cfg(0);
            cfg.epochs = 2;
            let t0 = Instant::now();
            let c = train_constructor(&train_scenes, &cfg, &out).unwrap();
            let csa_time = t0.elapsed().as_secs_f64();
            println!(
                "csaclc: {} steps in {:.2}s ({:.3}s/step)",
                c.steps,
                csa_time,
                csa_time / c.steps as f64
            );

            let mut dcfg = cfg;
            dcfg.stage = Stage::Dew;
            let t1 = Instant::now();
            let d = train_dew(&train_scenes, Some(&c.checkpoint), &dcfg, &out).unwrap();
            let dew_time = t1.elapsed().as_secs_f64();
            println!(
                "dew(joint): {} steps in {:.2}s ({:.3}s/step)",
                d.steps,
                dew_time,
                dew_time / d.steps as f64
            );

            let mut ccfg = cfg;
            ccfg.stage = Stage::Clc;
            let t2 = Instant::now();
            let cl = train_constructor(&train_scenes, &ccfg, &out).unwrap();
            println!(
                "clc: {} steps in {:.2}s ({:.3}s/step)",
                cl.steps,
                t2.elapsed().as_secs_f64(),
                t2.elapsed().as_secs_f64() / cl.steps as f64
            );

            let t3 = Instant::now();
            let _ = evaluate(&d.checkpoint, &eval_dir, Against::Oracle).unwrap();
            println!("eval dew over 8 scenes: {:.2}s", t3.elapsed().as_secs_f64());
        }
        "consistency" => {
            // Criterion-7 shape: constructor pseudo vs gt L1 to the oracle
            // on held-out scenes.
            let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(20);
            let out = tmp.join(format!("consistency_e{epochs}"));
            let mut cfg = desk_cfg(1);
            cfg.epochs = epochs;
            let t0 = Instant::now();
            let c = train_constructor(&train_scenes, &cfg, &out).unwrap();
            println!("trained csaclc {} steps in {:.1}s", c.steps, t0.elapsed().as_secs_f64());
            let constructor = Constructor::load(&c.checkpoint).unwrap();
            let mut wins = 0usize;
            for scene in &eval_scenes {
                let window = windows_from_scenes(std::slice::from_ref(scene), 1)
                    .unwrap()
                    .remove(0);
                let pseudo = constructor.pseudo_for_window(&window).unwrap();
                let l1_pseudo = mean_abs_diff(&pseudo, &window.gt_aligned_oracle);
                let l1_gt = mean_abs_diff(&window.gt_misaligned, &window.gt_aligned_oracle);
                let p = psnr(&pseudo, &window.gt_aligned_oracle);
                println!(
                    "{}: pseudo L1 {:.4} vs gt L1 {:.4} (pseudo psnr {:.2})  {}",
                    scene.entry.scene_id,
                    l1_pseudo,
                    l1_gt,
                    p,
                    if l1_pseudo < l1_gt { "WIN" } else { "-" }
                );
                if l1_pseudo < l1_gt {
                    wins += 1;
                }
            }
            println!("wins: {}/{}", wins, eval_scenes.len());
        }
        "supervision" => {
            let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(20);
            let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);
            let out = tmp.join(format!("supervision_e{epochs}_s{seed}"));
            let mut cfg = desk_cfg(seed);
            cfg.epochs = epochs;
            let t0 = Instant::now();
            let c = train_constructor(&train_scenes, &cfg, &out).unwrap();
            println!("constructor in {:.1}s", t0.elapsed().as_secs_f64());
            for sup in [Supervision::Original, Supervision::Pseudo, Supervision::Joint] {
                let mut dcfg = cfg;
                dcfg.stage = Stage::Dew;
                dcfg.supervision = sup;
                let cell = out.join(format!("{sup:?}"));
                let t1 = Instant::now();
                let ckpt = if sup == Supervision::Original {
                    None
                } else {
                    Some(c.checkpoint.as_path())
                };
                let d = train_dew(&train_scenes, ckpt, &dcfg, &cell).unwrap();
                let mut total = 0.0;
                for scene in &eval_scenes {
                    let restored = restored_for_scene(&d.checkpoint, scene).unwrap();
                    total += psnr(&restored, &scene.gt_aligned);
                }
                println!(
                    "{sup:?}: mean oracle psnr {:.3} dB ({:.1}s)",
                    total / eval_scenes.len() as f64,
                    t1.elapsed().as_secs_f64()
                );
            }
        }
        "frames" => {
            let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(20);
            let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);
            for n in [0usize, 1] {
                let out = tmp.join(format!("frames_n{n}_e{epochs}_s{seed}"));
                let mut cfg = desk_cfg(seed);
                cfg.epochs = epochs;
                cfg.frames_n = n;
                cfg.match_cfg.n = n;
                let t0 = Instant::now();
                let c = train_constructor(&train_scenes, &cfg, &out).unwrap();
                let mut total = 0.0;
                for scene in &eval_scenes {
                    let restored = restored_for_scene(&c.checkpoint, scene).unwrap();
                    total += psnr(&restored, &scene.gt_aligned);
                }
                println!(
                    "n={n} ({} frames): constructor oracle psnr {:.3} dB ({:.1}s)",
                    2 * n + 1,
                    total / eval_scenes.len() as f64,
                    t0.elapsed().as_secs_f64()
                );
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
