//! Wall-clock pilot: times a few optimizer steps at the acceptance-run scale
//! so schedule and budget decisions rest on measurements.

use std::time::Instant;

use condssl::augpipe::AugmentationPolicy;
use condssl::condproj::ConditioningSpec;
use condssl::datahub::{load_dataset, DatasetId, DatasetRef, Split};
use condssl::nn::BackboneSpec;
use condssl::sslcore::{Method, MethodConfig};
use condssl::trainer::{pretrain, PretrainSpec, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let count: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2048);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(256);
    let width: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(16);
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.3);

    let mut r = DatasetRef::new(DatasetId::Shapes, "", Split::Train);
    r.count = Some(count);
    r.image_size = Some(32);
    let t0 = Instant::now();
    let ds = load_dataset(&r).unwrap();
    println!("generated {} images in {:.2}s", ds.len(), t0.elapsed().as_secs_f64());

    let spec = PretrainSpec {
        method: MethodConfig::defaults(Method::Simclr),
        conditioning: ConditioningSpec::default(),
        backbone: BackboneSpec {
            widths: [width, width * 2, width * 4, width * 8],
            ..Default::default()
        },
        augment: AugmentationPolicy { out_size: 32, ..Default::default() },
        train: TrainConfig {
            epochs,
            batch_size: batch,
            base_lr: lr,
            seed: 1,
            ..Default::default()
        },
    };
    let dir = std::env::temp_dir().join("condssl-pilot");
    let t0 = Instant::now();
    let out = pretrain(&spec, &ds, &dir, None).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let steps = out.state.step;
    println!(
        "{} epochs, {} steps in {:.1}s ({:.2}s/step); losses {:?}",
        epochs,
        steps,
        secs,
        secs / steps as f64,
        out.state.loss_history
    );
}
