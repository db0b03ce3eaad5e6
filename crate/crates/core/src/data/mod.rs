//! CIFAR-10 ingestion, long-tailed split construction, head/mid/tail grouping,
//! augmentation stacks and batch assembly.

pub mod augment;
mod batch;
mod cifar;
mod longtail;
pub mod synth;

pub use augment::{
    cutmix, cutmix_with_box, hflip, mix_batch, mixup, mixup_with_lambda, pad_crop, smooth_one_hot, strong_augment,
    weak_augment, AugmentedBatch, CutBox, MixConfig, StrongRecipe,
};
pub use batch::{epoch_order, repeated_order, parallel_map, to_tensor, ClassBalancedSampler, Normalizer};
pub use cifar::{load_cifar10, read_batch_file, write_batch_file, RawDataset, Split, RECORD_BYTES};
pub use longtail::{
    group_classes, longtail_counts, make_longtailed, write_manifest_csv, DatasetKind, Group, LtDataset,
};

pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_BYTES: usize = CHANNELS * IMAGE_SIDE * IMAGE_SIDE;

/// A 32×32 RGB image stored as three row-major planes (R, G, B), matching the
/// CIFAR binary record layout.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Image {
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({} bytes)", self.pixels.len())
    }
}

impl Image {
    pub fn from_planes(pixels: Vec<u8>) -> Option<Self> {
        (pixels.len() == IMAGE_BYTES).then_some(Image { pixels })
    }

    pub fn filled(value: u8) -> Self {
        Image {
            pixels: vec![value; IMAGE_BYTES],
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.pixels
    }

    pub fn bytes_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.pixels[(c * IMAGE_SIDE + y) * IMAGE_SIDE + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.pixels[(c * IMAGE_SIDE + y) * IMAGE_SIDE + x] = v;
    }
}
