//! Blocked evaluation of the diagonal linear recurrence used by the scan layers.

/// Channels processed together per tile.
const CHANNEL_TILE: usize = 8;
/// Time steps processed per chunk before moving to the next tile.
const TIME_CHUNK: usize = 16;

/// `out_t = decay * out_{t-1} + z_t` with `out_{-1} = 0`, for `len` rows of
/// `dim` channels (row-major). Channels are independent, so the sequence is
/// evaluated tile by tile with the carried state held per tile; each element
/// sees exactly the same multiply-add sequence as a plain sequential loop.
pub fn linear_recurrence(z: &[f64], decay: &[f64], out: &mut [f64], len: usize, dim: usize) {
    debug_assert_eq!(z.len(), len * dim);
    debug_assert_eq!(out.len(), len * dim);
    debug_assert_eq!(decay.len(), dim);
    let mut state = [0.0f64; CHANNEL_TILE];
    for c0 in (0..dim).step_by(CHANNEL_TILE) {
        let width = CHANNEL_TILE.min(dim - c0);
        let a = &decay[c0..c0 + width];
        state[..width].fill(0.0);
        for t0 in (0..len).step_by(TIME_CHUNK) {
            for t in t0..(t0 + TIME_CHUNK).min(len) {
                let row = t * dim + c0;
                for j in 0..width {
                    state[j] = a[j] * state[j] + z[row + j];
                    out[row + j] = state[j];
                }
            }
        }
    }
}
