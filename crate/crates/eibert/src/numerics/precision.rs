//! Global precision switch: 64-bit by default, optional 32-bit storage rounding.
//!
//! All arithmetic runs in f64; in `Single` mode the result of every public
//! operation is rounded through f32 storage, so training behaves like an
//! f32 implementation while accumulations stay f64.

use std::cell::Cell;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::Double) };
}

pub fn set_precision(p: Precision) {
    PRECISION.with(|c| c.set(p));
}

pub fn precision() -> Precision {
    PRECISION.with(|c| c.get())
}

/// Runs `f` under the given precision, restoring the previous mode afterwards.
pub fn with_precision<T>(p: Precision, f: impl FnOnce() -> T) -> T {
    let prev = precision();
    set_precision(p);
    let out = f();
    set_precision(prev);
    out
}

#[inline]
pub fn round_value(x: f64) -> f64 {
    match precision() {
        Precision::Double => x,
        Precision::Single => x as f32 as f64,
    }
}

#[inline]
pub(crate) fn round_slice(data: &mut [f64]) {
    if precision() == Precision::Single {
        for v in data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" | "single" => Ok(Precision::Single),
            "f64" | "double" => Ok(Precision::Double),
            other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
        }
    }
}
