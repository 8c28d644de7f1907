//! Process-wide call counters for the expensive predicted-side operations.
//!
//! Counters only ever increase; compare snapshots taken before and after the
//! code under observation.

use std::sync::atomic::{AtomicUsize, Ordering};

static GRAM: AtomicUsize = AtomicUsize::new(0);
static KPCA: AtomicUsize = AtomicUsize::new(0);
static KDE_FIT: AtomicUsize = AtomicUsize::new(0);
static FILTER_FIT: AtomicUsize = AtomicUsize::new(0);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub gram: usize,
    pub kpca: usize,
    pub kde_fit: usize,
    pub filter_fit: usize,
}

impl Counters {
    /// Calls made since `earlier`.
    pub fn since(&self, earlier: &Counters) -> Counters {
        Counters {
            gram: self.gram - earlier.gram,
            kpca: self.kpca - earlier.kpca,
            kde_fit: self.kde_fit - earlier.kde_fit,
            filter_fit: self.filter_fit - earlier.filter_fit,
        }
    }
}

pub fn snapshot() -> Counters {
    Counters {
        gram: GRAM.load(Ordering::Relaxed),
        kpca: KPCA.load(Ordering::Relaxed),
        kde_fit: KDE_FIT.load(Ordering::Relaxed),
        filter_fit: FILTER_FIT.load(Ordering::Relaxed),
    }
}

pub(crate) fn gram() {
    GRAM.fetch_add(1, Ordering::Relaxed);
}

pub(crate) fn kpca() {
    KPCA.fetch_add(1, Ordering::Relaxed);
}

pub(crate) fn kde_fit() {
    KDE_FIT.fetch_add(1, Ordering::Relaxed);
}

pub(crate) fn filter_fit() {
    FILTER_FIT.fetch_add(1, Ordering::Relaxed);
}
