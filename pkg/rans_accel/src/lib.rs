//! rANS entropy coder with a C ABI, used as an optional fast backend by the
//! `taco` image codec (containers record it as coder id 1).
//!
//! The coder consumes the same per-element integer CDF tables as the
//! reference range coder: a row-major `cdf` matrix where row `i` is valid
//! through column `lengths[i]` (inclusive), starts at 0, and ends at
//! `1 << precision`; `offsets[i]` is the symbol value of the row's first
//! bin.  One symbol is coded per row, in row order.
//!
//! Stream layout: the final 64-bit coder state, little-endian, followed by
//! the 32-bit renormalization words in the order the decoder consumes them.
//! Encoding processes symbols in reverse so that decoding pops them forward;
//! the byte stream is not compatible with the reference coder's, which is
//! why containers carry a coder id.
//!
//! Entry points return negative error codes instead of panicking:
//! `-1` symbol outside its row's range, `-2` output buffer too small,
//! `-3` stream truncated or corrupt, `-4` malformed arguments or tables.
//! Both functions are stateless and copy everything they return, so they are
//! safe to call concurrently on distinct buffers.

use core::slice;

const RANS_L: u64 = 1 << 32;

const ERR_SYMBOL_RANGE: i64 = -1;
const ERR_BUFFER_SMALL: i64 = -2;
const ERR_CORRUPT: i64 = -3;
const ERR_BAD_ARGS: i64 = -4;

/// Widest table precision accepted; production tables use 12..=16 bits.
const MAX_PRECISION: u32 = 24;

struct Table<'a> {
    cdf: &'a [i32],
    lengths: &'a [i32],
    offsets: &'a [i32],
    stride: usize,
    precision: u32,
}

impl<'a> Table<'a> {
    fn total(&self) -> u64 {
        1u64 << self.precision
    }

    /// Row `i` of the CDF matrix (its `lengths[i] + 1` valid entries),
    /// checked against the stride and the 0 / `total` endpoint invariants.
    fn row(&self, i: usize) -> Result<&'a [i32], i64> {
        let len = self.lengths[i];
        if len < 1 || (len as usize) + 1 > self.stride {
            return Err(ERR_BAD_ARGS);
        }
        let start = i * self.stride;
        let row = &self.cdf[start..start + len as usize + 1];
        if row[0] != 0 || row[len as usize] as u64 != self.total() {
            return Err(ERR_BAD_ARGS);
        }
        Ok(row)
    }
}

fn encode_core(symbols: &[i32], table: &Table) -> Result<Vec<u8>, i64> {
    let precision = table.precision;
    let total = table.total();
    let mut x: u64 = RANS_L;
    let mut words: Vec<u32> = Vec::with_capacity(symbols.len() / 2 + 1);
    for i in (0..symbols.len()).rev() {
        let row = table.row(i)?;
        let bin = symbols[i] as i64 - table.offsets[i] as i64;
        if bin < 0 || (bin as usize) >= row.len() - 1 {
            return Err(ERR_SYMBOL_RANGE);
        }
        let b = bin as usize;
        if row[b] < 0 || row[b + 1] <= row[b] || row[b + 1] as u64 > total {
            return Err(ERR_BAD_ARGS);
        }
        let lo = row[b] as u64;
        let freq = (row[b + 1] - row[b]) as u64;
        // keep the state small enough that the push below stays reversible
        let x_max = (((RANS_L >> precision) as u128) << 32) * freq as u128;
        while (x as u128) >= x_max {
            words.push(x as u32);
            x >>= 32;
        }
        x = ((x / freq) << precision) + (x % freq) + lo;
    }
    let mut out = Vec::with_capacity(8 + 4 * words.len());
    out.extend_from_slice(&x.to_le_bytes());
    for word in words.iter().rev() {
        out.extend_from_slice(&word.to_le_bytes());
    }
    Ok(out)
}

fn decode_core(data: &[u8], table: &Table, out: &mut [i32]) -> Result<(), i64> {
    if out.is_empty() {
        return Ok(());
    }
    if data.len() < 8 {
        return Err(ERR_CORRUPT);
    }
    let mut state_bytes = [0u8; 8];
    state_bytes.copy_from_slice(&data[..8]);
    let mut x = u64::from_le_bytes(state_bytes);
    if x < RANS_L {
        return Err(ERR_CORRUPT);
    }
    let precision = table.precision;
    let mask = table.total() - 1;
    let mut pos = 8usize;
    for (i, slot_out) in out.iter_mut().enumerate() {
        let row = table.row(i)?;
        let slot = x & mask;
        let s = row.partition_point(|&c| (c as u64) <= slot) - 1;
        let lo = row[s] as u64;
        let hi = row[s + 1] as u64;
        if hi <= lo {
            return Err(ERR_BAD_ARGS);
        }
        let freq = hi - lo;
        *slot_out = s as i32 + table.offsets[i];
        x = freq * (x >> precision) + slot - lo;
        while x < RANS_L {
            if pos + 4 > data.len() {
                return Err(ERR_CORRUPT);
            }
            let mut word_bytes = [0u8; 4];
            word_bytes.copy_from_slice(&data[pos..pos + 4]);
            x = (x << 32) | u32::from_le_bytes(word_bytes) as u64;
            pos += 4;
        }
    }
    Ok(())
}

/// Common argument validation for both entry points; returns the table view.
unsafe fn table_from_raw<'a>(
    cdf: *const i32,
    lengths: *const i32,
    offsets: *const i32,
    rows: usize,
    row_stride: usize,
    precision: u32,
) -> Result<Table<'a>, i64> {
    if precision == 0 || precision > MAX_PRECISION {
        return Err(ERR_BAD_ARGS);
    }
    if rows > 0 {
        if cdf.is_null() || lengths.is_null() || offsets.is_null() {
            return Err(ERR_BAD_ARGS);
        }
        if row_stride < 2 {
            return Err(ERR_BAD_ARGS);
        }
    }
    let cells = match rows.checked_mul(row_stride) {
        Some(c) => c,
        None => return Err(ERR_BAD_ARGS),
    };
    Ok(Table {
        cdf: if rows == 0 { &[] } else { slice::from_raw_parts(cdf, cells) },
        lengths: if rows == 0 { &[] } else { slice::from_raw_parts(lengths, rows) },
        offsets: if rows == 0 { &[] } else { slice::from_raw_parts(offsets, rows) },
        stride: row_stride,
        precision,
    })
}

/// Encode `n_symbols` symbols (one per table row) into `out`.
///
/// Returns the number of bytes written, or a negative error code.
///
/// # Safety
/// Pointers must reference live buffers of the stated sizes: `symbols` holds
/// `n_symbols` values, `cdf` is `rows * row_stride` values with `lengths` and
/// `offsets` of `rows` values each, and `out` has `capacity` bytes.  No
/// references are retained after return.
#[no_mangle]
pub unsafe extern "C" fn taco_rans_encode(
    symbols: *const i32,
    n_symbols: usize,
    cdf: *const i32,
    lengths: *const i32,
    offsets: *const i32,
    rows: usize,
    row_stride: usize,
    precision: u32,
    out: *mut u8,
    capacity: usize,
) -> i64 {
    if out.is_null() || (n_symbols > 0 && symbols.is_null()) || n_symbols > rows {
        return ERR_BAD_ARGS;
    }
    let table = match table_from_raw(cdf, lengths, offsets, rows, row_stride, precision) {
        Ok(t) => t,
        Err(code) => return code,
    };
    let symbols = if n_symbols == 0 {
        &[][..]
    } else {
        slice::from_raw_parts(symbols, n_symbols)
    };
    match encode_core(symbols, &table) {
        Ok(bytes) => {
            if bytes.len() > capacity {
                return ERR_BUFFER_SMALL;
            }
            slice::from_raw_parts_mut(out, bytes.len()).copy_from_slice(&bytes);
            bytes.len() as i64
        }
        Err(code) => code,
    }
}

/// Decode `n_out` symbols (row `i`'s table decodes symbol `i`) from `data`.
///
/// Returns 0 on success, or a negative error code.
///
/// # Safety
/// Pointers must reference live buffers of the stated sizes: `data` holds
/// `data_len` bytes, the table buffers are as for [`taco_rans_encode`], and
/// `out` has room for `n_out` values.  No references are retained after
/// return.
#[no_mangle]
pub unsafe extern "C" fn taco_rans_decode(
    data: *const u8,
    data_len: usize,
    cdf: *const i32,
    lengths: *const i32,
    offsets: *const i32,
    rows: usize,
    row_stride: usize,
    precision: u32,
    out: *mut i32,
    n_out: usize,
) -> i64 {
    if (data_len > 0 && data.is_null()) || (n_out > 0 && out.is_null()) || n_out > rows {
        return ERR_BAD_ARGS;
    }
    let table = match table_from_raw(cdf, lengths, offsets, rows, row_stride, precision) {
        Ok(t) => t,
        Err(code) => return code,
    };
    let data = if data_len == 0 {
        &[][..]
    } else {
        slice::from_raw_parts(data, data_len)
    };
    let out = if n_out == 0 {
        &mut [][..]
    } else {
        slice::from_raw_parts_mut(out, n_out)
    };
    match decode_core(data, &table, out) {
        Ok(()) => 0,
        Err(code) => code,
    }
}
