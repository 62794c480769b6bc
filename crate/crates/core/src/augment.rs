//! Online augmentation: independent random horizontal and vertical flips,
//! drawn per presentation and only for training images.

use image::{imageops, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Partition, SplitSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentScope {
    /// Validation images are never augmented; there is no other scope.
    #[default]
    TrainOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub flip_horizontal_p: f64,
    pub flip_vertical_p: f64,
    pub enabled_for: AugmentScope,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { flip_horizontal_p: 0.5, flip_vertical_p: 0.5, enabled_for: AugmentScope::TrainOnly }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self { flip_horizontal_p: 0.0, flip_vertical_p: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_horizontal_p", self.flip_horizontal_p), ("flip_vertical_p", self.flip_vertical_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }

    /// Rolls the two axes independently. Always consumes two draws so the
    /// stream position does not depend on the probabilities.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Flips {
        let h: f64 = rng.random();
        let v: f64 = rng.random();
        Flips { horizontal: h < self.flip_horizontal_p, vertical: v < self.flip_vertical_p }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Flips {
    pub horizontal: bool,
    pub vertical: bool,
}

impl Flips {
    pub const NONE: Flips = Flips { horizontal: false, vertical: false };

    pub fn any(self) -> bool {
        self.horizontal || self.vertical
    }

    pub fn apply(self, image: &RgbImage) -> RgbImage {
        let mut out = image.clone();
        if self.horizontal {
            imageops::flip_horizontal_in_place(&mut out);
        }
        if self.vertical {
            imageops::flip_vertical_in_place(&mut out);
        }
        out
    }
}

pub fn augment<R: Rng + ?Sized>(image: &RgbImage, policy: &AugmentPolicy, rng: &mut R) -> RgbImage {
    policy.draw(rng).apply(image)
}

/// True iff `id` is a training id of `split`.
pub fn is_augmentable(id: &str, split: &SplitSpec) -> Result<bool> {
    match split.partition_of(id) {
        Some(Partition::Train) => Ok(true),
        Some(Partition::Validation) => Ok(false),
        None => Err(Error::ForeignId(id.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use image::Rgb;
    use proptest::prelude::*;
    use rand::Rng;

    fn noise(w: u32, h: u32, seed: u64) -> RgbImage {
        let mut r = rng::seeded(seed);
        RgbImage::from_fn(w, h, |_, _| Rgb([r.random(), r.random(), r.random()]))
    }

    #[test]
    fn identity_policy() {
        let img = noise(17, 9, 1);
        let mut r = rng::seeded(0);
        for _ in 0..20 {
            assert_eq!(augment(&img, &AugmentPolicy::disabled(), &mut r), img);
        }
    }

    #[test]
    fn forced_flip_twice_restores() {
        let img = noise(17, 9, 2);
        let policy = AugmentPolicy { flip_horizontal_p: 1.0, flip_vertical_p: 0.0, ..Default::default() };
        let mut r = rng::seeded(0);
        let once = augment(&img, &policy, &mut r);
        assert_ne!(once, img);
        assert_eq!(augment(&once, &policy, &mut r), img);
    }

    #[test]
    fn flip_frequency_near_half() {
        let policy = AugmentPolicy::default();
        let mut r = rng::seeded(42);
        let n = 10_000;
        let (mut h, mut v) = (0, 0);
        for _ in 0..n {
            let f = policy.draw(&mut r);
            h += f.horizontal as usize;
            v += f.vertical as usize;
        }
        for count in [h, v] {
            let freq = count as f64 / n as f64;
            assert!((0.47..=0.53).contains(&freq), "{freq}");
        }
    }

    #[test]
    fn augmentable_membership() {
        let split = SplitSpec {
            seed: 0,
            train_fraction: 0.8,
            train_ids: vec!["t".into()],
            validation_ids: vec!["v".into()],
            manifest_checksum: String::new(),
        };
        assert!(is_augmentable("t", &split).unwrap());
        assert!(!is_augmentable("v", &split).unwrap());
        assert!(matches!(is_augmentable("x", &split), Err(Error::ForeignId(_))));
    }

    #[test]
    fn invalid_probability_rejected() {
        let p = AugmentPolicy { flip_horizontal_p: 1.5, ..Default::default() };
        assert!(p.validate().is_err());
    }

    proptest! {
        #[test]
        fn shape_preserved_and_involutive(w in 1u32..24, h in 1u32..24, seed in any::<u64>(), fh: bool, fv: bool) {
            let img = noise(w, h, seed);
            let flips = Flips { horizontal: fh, vertical: fv };
            let out = flips.apply(&img);
            prop_assert_eq!(out.dimensions(), img.dimensions());
            prop_assert_eq!(flips.apply(&out), img);
        }
    }
}
