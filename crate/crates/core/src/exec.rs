//! Execution policy for the numeric kernels.
//!
//! Kernels only ever parallelize over independent output chunks, and every
//! reduction runs in a fixed index order inside one chunk. Results are
//! therefore bit-identical whether or not the thread pool is used; serial
//! mode exists so a run can be pinned to one thread for profiling and for
//! strict reproduction on exotic platforms.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

static SERIAL: AtomicBool = AtomicBool::new(false);

/// Force every kernel onto the calling thread.
pub fn set_serial(serial: bool) {
    SERIAL.store(serial, Ordering::Relaxed);
}

pub fn is_serial() -> bool {
    SERIAL.load(Ordering::Relaxed)
}

/// Visit `out` in chunks of `chunk` elements, passing the chunk index.
pub(crate) fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 || out.is_empty() {
        return;
    }
    if is_serial() || rayon::current_num_threads() == 1 || out.len() / chunk < 2 {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}
