use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{DataError, SampleRecord, SampleSource, SkipEntry};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `(B, 6, H, W)`
    pub inputs: Array4<f32>,
    /// `(B, H, W)`
    pub targets: Array3<u8>,
    pub scene_ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.scene_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scene_ids.is_empty()
    }

    pub fn from_samples(samples: &[SampleRecord]) -> Self {
        assert!(!samples.is_empty(), "a batch needs at least one sample");
        let views: Vec<_> = samples.iter().map(|s| s.input.view()).collect();
        let inputs = ndarray::stack(Axis(0), &views).expect("samples share one shape");
        let (h, w) = (samples[0].target.height(), samples[0].target.width());
        let mut targets = Array3::<u8>::zeros((samples.len(), h, w));
        for (mut dst, s) in targets.outer_iter_mut().zip(samples) {
            dst.as_slice_mut()
                .expect("fresh array is contiguous")
                .copy_from_slice(s.target.data());
        }
        Self {
            inputs,
            targets,
            scene_ids: samples.iter().map(|s| s.scene_id.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub shuffle: bool,
    pub seed: u64,
    pub epoch: u64,
}

impl BatchOptions {
    pub fn sequential(batch_size: usize) -> Self {
        Self {
            batch_size,
            shuffle: false,
            seed: 0,
            epoch: 0,
        }
    }
}

/// Lazily loads samples in visiting order and yields batches of valid ones.
/// Failed samples are dropped and recorded in [`Batches::skipped`].
pub struct Batches<'a, S: SampleSource + ?Sized> {
    source: &'a S,
    order: Vec<usize>,
    next: usize,
    batch_size: usize,
    epoch: u64,
    skipped: Vec<SkipEntry>,
    emitted_samples: usize,
}

impl<S: SampleSource + ?Sized> Batches<'_, S> {
    pub fn skipped(&self) -> &[SkipEntry] {
        &self.skipped
    }

    pub fn emitted_samples(&self) -> usize {
        self.emitted_samples
    }
}

pub fn make_batches<S: SampleSource + ?Sized>(source: &S, opts: BatchOptions) -> Batches<'_, S> {
    assert!(opts.batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..source.len()).collect();
    if opts.shuffle {
        order.shuffle(&mut rng_for(opts.seed, &format!("shuffle/{}", opts.epoch)));
    }
    Batches {
        source,
        order,
        next: 0,
        batch_size: opts.batch_size,
        epoch: opts.epoch,
        skipped: Vec::new(),
        emitted_samples: 0,
    }
}

impl<S: SampleSource + ?Sized> Iterator for Batches<'_, S> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let mut samples = Vec::with_capacity(self.batch_size);
        while samples.len() < self.batch_size && self.next < self.order.len() {
            let want = (self.batch_size - samples.len()).min(self.order.len() - self.next);
            let chunk = &self.order[self.next..self.next + want];
            self.next += want;
            let (source, epoch) = (self.source, self.epoch);
            let loaded: Vec<_> = chunk
                .par_iter()
                .map(|&i| (i, source.load(i, epoch)))
                .collect();
            for (i, result) in loaded {
                match result {
                    Ok(s) => samples.push(s),
                    Err(e) => self.skipped.push(SkipEntry::from_error(source.scene_id(i), &e)),
                }
            }
        }
        if samples.is_empty() {
            return None;
        }
        self.emitted_samples += samples.len();
        Some(Batch::from_samples(&samples))
    }
}

/// Eagerly materializes every batch; fails when nothing loads.
pub fn collect_batches<S: SampleSource + ?Sized>(
    source: &S,
    opts: BatchOptions,
) -> Result<(Vec<Batch>, Vec<SkipEntry>), DataError> {
    let mut it = make_batches(source, opts);
    let batches: Vec<Batch> = it.by_ref().collect();
    let skipped = it.skipped().to_vec();
    if batches.is_empty() {
        return Err(DataError::NoValidSamples {
            skipped: skipped.len(),
        });
    }
    Ok((batches, skipped))
}
