//! Event-centred realignment of measurement times.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::LongView;
use crate::error::{Error, Result};

/// Per-subject event time; `None` marks a subject known to have no event.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventTable {
    events: BTreeMap<String, Option<f64>>,
}

impl EventTable {
    pub fn new(events: BTreeMap<String, Option<f64>>) -> Self {
        Self { events }
    }

    pub fn event_time(&self, subject: &str) -> Option<f64> {
        self.events.get(subject).copied().flatten()
    }

    pub fn subjects(&self) -> impl Iterator<Item = &String> {
        self.events.keys()
    }

    /// Subjects listed in the table that have no rows in `view`.
    pub fn unknown_subjects(&self, view: &LongView) -> Vec<String> {
        let present: BTreeSet<&String> = view.blocks().iter().map(|b| &b.id).collect();
        self.events
            .keys()
            .filter(|id| !present.contains(id))
            .cloned()
            .collect()
    }
}

impl FromIterator<(String, Option<f64>)> for EventTable {
    fn from_iter<I: IntoIterator<Item = (String, Option<f64>)>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// Where the last visit of a subject without an event is placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventlessAnchor {
    /// Last visit lands one bin before the origin.
    #[default]
    BeforeOrigin,
    /// Last visit lands on the origin.
    Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignOptions {
    pub bin_width: f64,
    pub eventless: EventlessAnchor,
}

impl AlignOptions {
    pub fn new(bin_width: f64) -> Self {
        Self {
            bin_width,
            eventless: EventlessAnchor::default(),
        }
    }
}

/// Re-expresses each subject's times relative to its event and bins them.
///
/// Times become multiples of `bin_width` (nearest bin, kept inside the
/// subject's relative span); rows landing in the same bin are replaced by
/// their feature-wise mean. Subjects without an event are shifted left of the
/// origin according to [`EventlessAnchor`].
pub fn align_to_event(view: &LongView, events: &EventTable, opts: &AlignOptions) -> Result<LongView> {
    let w = opts.bin_width;
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::InvalidArgument(format!("bin width must be positive, got {w}")));
    }
    let values = view.values();
    let p = view.n_features();
    let mut ids = Vec::new();
    let mut times = Vec::new();
    let mut flat: Vec<f64> = Vec::new();

    for block in view.blocks() {
        let t = &view.times()[block.rows()];
        let first = t[0];
        let last = *t.last().expect("blocks are non-empty");
        let offset = match events.event_time(&block.id) {
            Some(e) => {
                if e < first || e > last {
                    warn!(
                        "event time {e} of subject `{}` lies outside its observed span [{first}, {last}]",
                        block.id
                    );
                }
                e
            }
            None => match opts.eventless {
                EventlessAnchor::BeforeOrigin => last + w,
                EventlessAnchor::Origin => last,
            },
        };
        let rel: Vec<f64> = t.iter().map(|&ti| ti - offset).collect();
        let (lo, hi) = (rel[0], *rel.last().unwrap());

        let mut r = 0;
        while r < rel.len() {
            let bin = (rel[r] / w).round();
            let mut end = r + 1;
            while end < rel.len() && (rel[end] / w).round() == bin {
                end += 1;
            }
            let rows = values.slice(ndarray::s![block.start + r..block.start + end, ..]);
            let mean = rows.mean_axis(Axis(0)).expect("non-empty bin");
            ids.push(block.id.clone());
            times.push((bin * w).clamp(lo, hi));
            flat.extend(mean.iter());
            r = end;
        }
    }

    let n = ids.len();
    let out = Array2::from_shape_vec((n, p), flat).map_err(|e| Error::InvalidView(e.to_string()))?;
    LongView::new(out, ids, times, view.feature_names().to_vec())
}
