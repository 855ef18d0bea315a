//! Domain types shared by every stage of the pipeline.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TypeError {
    #[error("invalid window [{start}, {end}] for {clips} clips")]
    InvalidWindow { start: usize, end: usize, clips: usize },
    #[error("instance {id}: {reason}")]
    InvalidInstance { id: String, reason: String },
}

/// Inclusive clip-index window `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: usize,
    pub end: usize,
}

impl TimeWindow {
    /// Checked constructor: `start <= end < clips`.
    pub fn new(start: usize, end: usize, clips: usize) -> Result<Self, TypeError> {
        if start > end || end >= clips {
            return Err(TypeError::InvalidWindow { start, end, clips });
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, clip: usize) -> bool {
        (self.start..=self.end).contains(&clip)
    }

    pub fn clips(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

impl fmt::Display for TimeWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.start, self.end)
    }
}

/// Widths of the three cheap-feature channels (rooms, interactions, objects).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub rooms: usize,
    pub interactions: usize,
    pub objects: usize,
}

/// One of the three cheap semantic channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Rooms,
    Interactions,
    Objects,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Rooms, Channel::Interactions, Channel::Objects];

    pub fn short_name(self) -> &'static str {
        match self {
            Channel::Rooms => "R",
            Channel::Interactions => "I",
            Channel::Objects => "O",
        }
    }
}

impl ChannelLayout {
    pub fn total(&self) -> usize {
        self.rooms + self.interactions + self.objects
    }

    /// Column range `[start, end)` of `channel` inside the concatenated cheap feature.
    pub fn range(&self, channel: Channel) -> std::ops::Range<usize> {
        match channel {
            Channel::Rooms => 0..self.rooms,
            Channel::Interactions => self.rooms..self.rooms + self.interactions,
            Channel::Objects => self.rooms + self.interactions..self.total(),
        }
    }
}

/// One (sequence, query, ground-truth window) problem with precomputed features.
#[derive(Clone, Debug, PartialEq)]
pub struct EmInstance {
    pub instance_id: String,
    pub query_tokens: Vec<u32>,
    /// `L × D_s`, the three channels concatenated.
    pub cheap: Array2<f32>,
    /// `L × D_v`
    pub expensive: Array2<f32>,
    pub channels: ChannelLayout,
    pub ground_truth: TimeWindow,
}

impl EmInstance {
    pub fn new(
        instance_id: String,
        query_tokens: Vec<u32>,
        cheap: Array2<f32>,
        expensive: Array2<f32>,
        channels: ChannelLayout,
        ground_truth: TimeWindow,
    ) -> Result<Self, TypeError> {
        let bad = |reason: String| TypeError::InvalidInstance {
            id: instance_id.clone(),
            reason,
        };
        let clips = cheap.nrows();
        if clips == 0 {
            return Err(bad("zero clips".into()));
        }
        if expensive.nrows() != clips {
            return Err(bad(format!(
                "cheap has {clips} rows but expensive has {}",
                expensive.nrows()
            )));
        }
        if channels.total() != cheap.ncols() {
            return Err(bad(format!(
                "channel widths sum to {} but cheap width is {}",
                channels.total(),
                cheap.ncols()
            )));
        }
        if query_tokens.is_empty() {
            return Err(bad("empty query".into()));
        }
        if !cheap.iter().chain(expensive.iter()).all(|v| v.is_finite()) {
            return Err(bad("non-finite feature".into()));
        }
        if ground_truth.start > ground_truth.end || ground_truth.end >= clips {
            return Err(bad(format!("ground truth {ground_truth} out of range")));
        }
        Ok(Self {
            instance_id,
            query_tokens,
            cheap,
            expensive,
            channels,
            ground_truth,
        })
    }

    pub fn clip_count(&self) -> usize {
        self.cheap.nrows()
    }
}

/// Per-clip binary selection.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct SelectionMask {
    bits: Vec<bool>,
}

impl SelectionMask {
    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![false; len] }
    }

    pub fn ones(len: usize) -> Self {
        Self { bits: vec![true; len] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Self::zeros(len);
        for i in indices {
            m.bits[i] = true;
        }
        m
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, on: bool) {
        self.bits[i] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn or(&self, other: &Self) -> Self {
        assert_eq!(self.len(), other.len());
        Self {
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !(*a && *b))
    }

    /// `'0'`/`'1'` string, clip 0 first.
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str) -> Option<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Some(false),
                '1' => Some(true),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(Self::from_bits)
    }

    /// Column vector with 1.0 on selected clips.
    pub fn to_column(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), 1), |(i, _)| if self.bits[i] { 1.0 } else { 0.0 })
    }
}

/// Behaviour statistics for one subset of queries.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BehaviorStats {
    /// Mean IoU between the selected clip set and the ground-truth clip set, in `[0, 1]`.
    pub mean_iou: f64,
    /// Percentage of queries whose selection hits at least one ground-truth clip.
    pub nonzero_pct: f64,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BehaviorSplit {
    pub correct: BehaviorStats,
    pub wrong: BehaviorStats,
}

/// Evaluation summary for one run on one split.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mr1")]
    pub mr_at_1: f64,
    #[serde(rename = "mr5")]
    pub mr_at_5: f64,
    #[serde(rename = "eta")]
    pub efficiency_eta: f64,
    pub tflops: f64,
    #[serde(rename = "mean_iou")]
    pub mean_iou_selected_vs_gt: f64,
    #[serde(rename = "nonzero_pct")]
    pub mean_nonzero_intersection: f64,
    pub behavior: BehaviorSplit,
}

impl MetricsReport {
    pub fn is_consistent(&self) -> bool {
        let fields = [
            self.mr_at_1,
            self.mr_at_5,
            self.efficiency_eta,
            self.tflops,
            self.mean_iou_selected_vs_gt,
            self.mean_nonzero_intersection,
        ];
        fields.iter().all(|v| v.is_finite())
            && (0.0..=1.0).contains(&self.mr_at_1)
            && (0.0..=1.0).contains(&self.mr_at_5)
            && self.mr_at_1 <= self.mr_at_5
            && (0.0..=100.0).contains(&self.efficiency_eta)
            && self.tflops >= 0.0
            && (0.0..=1.0).contains(&self.mean_iou_selected_vs_gt)
            && (0.0..=100.0).contains(&self.mean_nonzero_intersection)
    }
}
