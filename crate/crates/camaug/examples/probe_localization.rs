//! Temporary diagnostic: per-style CAM localization for the pipeline's
//! 2-class held-out classifiers and a 3-class all-centres classifier, at
//! several image sizes. Classifiers are cached under /tmp/probe-cls.
//! Not part of the test suite.

use std::collections::BTreeSet;
use std::path::PathBuf;

use camaug::classifier::{
    build_classifier, load_classifier, predict_centre, save_classifier, train_classifier,
    BackboneConfig, BackboneKind, CheckpointMeta, Classifier, TrainOpts,
};
use camaug::data::split::split_patient_level;
use camaug::data::synth::{generate_synthetic, OverlayStyle, SynthConfig};
use camaug::data::{MultiCentreDataset, SplitSpec};
use camaug::filters::{sobel, SobelMode};
use camaug::harness::SPLIT_RATIOS;
use camaug::saliency::{gradcam_with_trace, CamTarget};

fn all_centres_split(ds: &MultiCentreDataset, seed: u64) -> SplitSpec {
    let val_patients: BTreeSet<String> = (1..=3u32)
        .flat_map(|c| [format!("c{c}p018"), format!("c{c}p019")])
        .collect();
    let mut split = SplitSpec {
        held_out_centre: 0,
        train: Vec::new(),
        val: Vec::new(),
        test_in: Vec::new(),
        test_out: Vec::new(),
        seed,
        ratios: (0.9, 0.1, 0.0),
    };
    for s in &ds.samples {
        if val_patients.contains(&s.patient_id) {
            split.val.push(s.sample_id.clone());
        } else {
            split.train.push(s.sample_id.clone());
        }
    }
    split
}

fn trained(
    tag: &str,
    ds: &MultiCentreDataset,
    split: &SplitSpec,
    num_centres: usize,
    size: usize,
    seed: u64,
    epochs: usize,
) -> Classifier {
    let dir = PathBuf::from(format!("/tmp/probe-cls/{tag}"));
    if dir.join("classifier.json").exists() {
        return load_classifier(&dir).unwrap().0;
    }
    let backbone = BackboneConfig { kind: BackboneKind::Small, width: 8, input_size: size };
    let mut model = build_classifier(num_centres, &backbone, seed).unwrap();
    let opts = TrainOpts {
        epochs,
        lr: 1e-3,
        batch: 4,
        augment: true,
        sobel_mode: SobelMode::GrayscaleFirst,
        seed,
    };
    train_classifier(&mut model, ds, split, &opts).unwrap();
    let meta = CheckpointMeta {
        centres: model.centres.clone(),
        split_fingerprint: split.fingerprint(),
        config: backbone,
        epochs,
        seed,
        augment: true,
        weights_sha256: model.weights_hash(),
    };
    save_classifier(&dir, &model, &meta).unwrap();
    model
}

fn eval_split(
    model: &Classifier,
    ds: &MultiCentreDataset,
    val: &[String],
    styles: &[OverlayStyle; 3],
    dump: usize,
) -> (f64, f64) {
    let truth = ds.overlay_truth.as_ref().unwrap();
    let mut per_centre: std::collections::BTreeMap<u32, (usize, usize, usize, f64, f64)> =
        Default::default();
    let mut dumped = 0usize;
    for id in val {
        let s = ds.get(id).unwrap();
        let edge = sobel(&s.image, SobelMode::GrayscaleFirst).unwrap();
        let (_, predicted) = predict_centre(model, &edge).unwrap();
        let trace = gradcam_with_trace(model, &edge, CamTarget::Predicted).unwrap();
        let cam = &trace.cam;
        let region = &truth[id];
        let n_in = region.iter().filter(|&&v| v == 1.0).count();
        let mut inside = 0.0;
        let mut outside = 0.0;
        for (c, r) in cam.iter().zip(region.iter()) {
            if *r == 1.0 {
                inside += c;
            } else {
                outside += c;
            }
        }
        let (mi, mo) = (inside / n_in as f64, outside / (cam.len() - n_in) as f64);
        let e = per_centre.entry(s.centre).or_insert((0, 0, 0, 0.0, 0.0));
        e.0 += 1;
        if predicted == s.centre {
            e.1 += 1;
        }
        if mi > mo {
            e.2 += 1;
        } else if dumped < dump {
            dumped += 1;
            let (fh, fw) = (trace.normalized.shape()[0], trace.normalized.shape()[1]);
            println!(
                "-- MISS {} ({:?}) inside {mi:.3} outside {mo:.3}, {fh}x{fw} map:",
                id,
                styles[s.centre as usize - 1]
            );
            for y in 0..fh {
                let row: Vec<String> = (0..fw)
                    .map(|x| format!("{:2.0}", trace.normalized[[y, x]] * 9.9))
                    .collect();
                println!("   {}", row.join(""));
            }
            let (ih, iw) = (region.shape()[0], region.shape()[1]);
            println!("   overlay footprint:");
            for y in 0..fh {
                let mut row = String::new();
                for x in 0..fw {
                    let (y0, y1) = (y * ih / fh, (y + 1) * ih / fh);
                    let (x0, x1) = (x * iw / fw, (x + 1) * iw / fw);
                    let mut cov = 0.0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            cov += region[[yy, xx]];
                        }
                    }
                    row.push_str(&format!("{:2.0}", cov / ((y1 - y0) * (x1 - x0)) as f64 * 9.9));
                }
                println!("   {row}");
            }
        }
        e.3 += mi;
        e.4 += mo;
    }
    let mut tot = (0usize, 0usize, 0usize);
    for (centre, (n, acc, ok, si, so)) in &per_centre {
        println!(
            "  centre {centre} ({:?}): acc {acc}/{n} loc {ok}/{n} (inside {:.3} outside {:.3})",
            styles[(*centre as usize - 1) % 3],
            si / *n as f64,
            so / *n as f64
        );
        tot.0 += n;
        tot.1 += acc;
        tot.2 += ok;
    }
    (tot.1 as f64 / tot.0 as f64, tot.2 as f64 / tot.0 as f64)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let size: usize = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(32);
    let mode = args.get(2).cloned().unwrap_or_else(|| "held".into());
    let epochs: usize = args.get(3).and_then(|a| a.parse().ok()).unwrap_or(10);
    let dump: usize = args.get(4).and_then(|a| a.parse().ok()).unwrap_or(0);
    let seed = 2400u64;
    let styles =
        [OverlayStyle::CornerText, OverlayStyle::InstrumentWidget, OverlayStyle::Border];

    let sc = SynthConfig::for_centres(3, 200, 20, size);
    let ds = generate_synthetic(&sc, seed).unwrap();

    if mode == "all" {
        let split = all_centres_split(&ds, seed);
        let model = trained(&format!("all{size}e{epochs}"), &ds, &split, 3, size, seed, epochs);
        let (acc, loc) = eval_split(&model, &ds, &split.val, &styles, dump);
        println!("size {size} all-centres e{epochs}: acc {acc:.3} loc {loc:.3}");
    } else {
        for held_out in 1..=3u32 {
            let split = split_patient_level(&ds, held_out, SPLIT_RATIOS, seed).unwrap();
            let model = trained(
                &format!("held{held_out}s{size}e{epochs}"),
                &ds,
                &split,
                2,
                size,
                seed,
                epochs,
            );
            println!("held_out={held_out}:");
            let (acc, loc) = eval_split(&model, &ds, &split.val, &styles, dump);
            println!("  => acc {acc:.3} loc {loc:.3}");
        }
    }
}
