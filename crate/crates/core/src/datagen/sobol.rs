//! Unscrambled two-dimensional Sobol points (Gray-code order, Joe–Kuo
//! direction numbers for the second coordinate).

const BITS: usize = 32;

fn directions() -> [[u32; BITS]; 2] {
    let mut v = [[0u32; BITS]; 2];
    for k in 0..BITS {
        v[0][k] = 1u32 << (BITS - 1 - k);
    }
    // Primitive polynomial x + 1: m_k = 2·m_{k−1} ⊕ m_{k−1}, m_1 = 1.
    let mut m = 1u32;
    for k in 0..BITS {
        if k > 0 {
            m = (m << 1) ^ m;
        }
        v[1][k] = m << (BITS - 1 - k);
    }
    v
}

/// Points `skip..skip+n` of the sequence in [0, 1)².
pub fn sobol_2d(n: usize, skip: usize) -> Vec<[f64; 2]> {
    let v = directions();
    let scale = 1.0 / (1u64 << BITS) as f64;
    let mut x = [0u32; 2];
    let mut out = Vec::with_capacity(n);
    for i in 0..skip + n {
        if i >= skip {
            out.push([x[0] as f64 * scale, x[1] as f64 * scale]);
        }
        let c = (!(i as u64)).trailing_zeros() as usize;
        if c < BITS {
            x[0] ^= v[0][c];
            x[1] ^= v[1][c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_reference_prefix() {
        // First ten points of an independent unscrambled implementation.
        let expect = [
            [0.0, 0.0],
            [0.5, 0.5],
            [0.75, 0.25],
            [0.25, 0.75],
            [0.375, 0.375],
            [0.875, 0.875],
            [0.625, 0.125],
            [0.125, 0.625],
            [0.1875, 0.3125],
            [0.6875, 0.8125],
        ];
        assert_eq!(sobol_2d(10, 0), expect.to_vec());
        assert_eq!(sobol_2d(3, 2), expect[2..5].to_vec());
    }
}
