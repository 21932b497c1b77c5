//! Overfit sanity run on a synthetic corpus: 10 images per class, default
//! head, full fine-tuning.
//!
//! `cargo run -p wastewise-core --example overfit -- [backbone] [epochs]`

use std::time::Instant;

use wastewise_core::classifier::{build_classifier, HeadConfig, TrainConfig, WeightsSource};
use wastewise_core::dataset::ImageSet;
use wastewise_core::fixtures::synthetic_image;
use wastewise_core::labels::ClassLabel;

fn main() {
    let mut args = std::env::args().skip(1);
    let backbone = args.next().unwrap_or_else(|| "mobilenet_v2".into());
    let epochs = args.next().map_or(30, |s| s.parse().expect("epoch count"));
    let entry = wastewise_core::backbone::lookup(&backbone).expect("registered backbone");
    let mut set = ImageSet::default();
    for label in ClassLabel::ALL {
        for i in 0..10 {
            set.images.push(synthetic_image(label, i, entry.input_size.1 as u32, entry.input_size.0 as u32));
            set.labels.push(label);
        }
    }
    let mut model = build_classifier::<f32>(&backbone, HeadConfig::default(), &WeightsSource::Random, 42).unwrap();
    let cfg = TrainConfig { max_epochs: epochs, ..TrainConfig::default() };
    let start = Instant::now();
    model
        .fit(&set, &ImageSet::default(), &cfg, |e| {
            println!("epoch {:>2}  loss {:.4}  acc {:.3}  ({:.0?})", e.epoch, e.train_loss, e.train_acc, start.elapsed())
        })
        .unwrap();
    let (loss, acc) = model.evaluate_set(&set);
    println!("inference on training images: loss {loss:.4} acc {acc:.3} in {:.0?}", start.elapsed());
}
