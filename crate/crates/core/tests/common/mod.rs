#![allow(dead_code)]

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tonguescreen_core::dataset::{DatasetManifest, ImageRecord};
use tonguescreen_core::trainer::LabeledImages;
use tonguescreen_core::{LesionClass, TaskClass, TaskSpec};

/// Two visually separable classes: solid colour fields (benign) and
/// two-colour vertical stripes (pre-cancerous). Colours are random per
/// image so only the texture separates the classes.
pub fn separable_set(n_per_class: usize, side: u32, period: u32, seed: u64) -> (DatasetManifest, LabeledImages) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut images = LabeledImages::new(TaskSpec::BINARY);
    for i in 0..2 * n_per_class {
        let striped = i % 2 == 1;
        let class = if striped { LesionClass::Leukoplakia } else { LesionClass::FissuredTongue };
        let mut colour = || Rgb([rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()]);
        // Stripes alternate a light and a dark colour.
        let lum = |c: Rgb<u8>| (c.0[0] as i32 + c.0[1] as i32 + c.0[2] as i32) / 3;
        let (a, b) = loop {
            let (a, b) = (colour(), colour());
            if (lum(a) - lum(b)).abs() >= 80 {
                break (a, b);
            }
        };
        let phase = rng.random_range(0..period);
        let img = RgbImage::from_fn(side, side, |x, _| {
            if striped && ((x + phase) / (period / 2)) % 2 == 0 { b } else { a }
        });
        let id = format!("syn{i:03}");
        records.push(ImageRecord::new(&id, format!("images/{id}.png"), class, side, side, None, ""));
        images.insert(&id, img, TaskClass::Risk(class.risk())).unwrap();
    }
    (DatasetManifest::new(TaskSpec::BINARY, records).unwrap(), images)
}
