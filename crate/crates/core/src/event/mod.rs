//! Event data model, the `EVS1` file format, voxel grids and event images.

mod io;
mod render;
mod voxel;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{decode_events, encode_events, read_events, write_events, EVENT_MAGIC};
pub use render::{render_grid_rgb, render_rgb, write_png_rgb};
pub use voxel::{bin_weights, to_event_image, voxelize, EventImage, VoxelGrid, DEFAULT_BINS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_sign(sign: i8) -> Option<Self> {
        match sign {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }
}

/// A single brightness-change record. `t` is in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, polarity: Polarity) -> Self {
        Self { t, x, y, polarity }
    }
}

/// Time-ordered events from a `width × height` sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates bounds and timestamp order.
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("sensor dimensions must be positive"));
        }
        for (i, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(Error::invalid(format!(
                    "event {i} at ({}, {}) outside {width}x{height} sensor",
                    e.x, e.y
                )));
            }
            if i > 0 && events[i - 1].t > e.t {
                return Err(Error::invalid(format!(
                    "event {i} timestamp {} precedes {}",
                    e.t,
                    events[i - 1].t
                )));
            }
        }
        Ok(Self {
            width,
            height,
            events,
        })
    }

    /// Sorts by `(t, y, x, polarity)` before validating.
    pub fn from_unsorted(width: u16, height: u16, mut events: Vec<Event>) -> Result<Self> {
        events.sort_by_key(|e| (e.t, e.y, e.x, e.polarity.sign()));
        Self::new(width, height, events)
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Microseconds between first and last event.
    pub fn duration(&self) -> u64 {
        match (self.events.first(), self.events.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0,
        }
    }

    pub fn polarity_sum(&self) -> i64 {
        self.events.iter().map(|e| e.polarity.sign() as i64).sum()
    }

    /// Net polarity per pixel, row-major.
    pub fn pixel_polarity(&self) -> Vec<i64> {
        let w = self.width as usize;
        let mut acc = vec![0i64; w * self.height as usize];
        for e in &self.events {
            acc[e.y as usize * w + e.x as usize] += e.polarity.sign() as i64;
        }
        acc
    }
}
