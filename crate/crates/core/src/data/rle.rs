use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Run-length encoded binary mask. Runs alternate background/foreground in
/// row-major order, starting with background; a mask whose first pixel is
/// foreground starts with a zero-length run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    /// `[height, width]`
    pub shape: [usize; 2],
    pub runs: Vec<u32>,
}

/// Encodes the pixels of `slice` equal to `class_id`.
pub fn rle_encode(slice: &[u8], height: usize, width: usize, class_id: u8) -> Result<RleMask> {
    if slice.len() != height * width {
        return Err(Error::Validation(format!(
            "slice has {} pixels, expected {height}x{width}",
            slice.len()
        )));
    }
    Ok(encode_iter(
        slice.iter().map(|&l| l == class_id),
        [height, width],
    ))
}

/// Encodes a mask whose non-zero pixels are foreground.
pub fn rle_encode_binary(mask: &[u8], height: usize, width: usize) -> Result<RleMask> {
    if mask.len() != height * width {
        return Err(Error::Validation(format!(
            "mask has {} pixels, expected {height}x{width}",
            mask.len()
        )));
    }
    Ok(encode_iter(mask.iter().map(|&v| v != 0), [height, width]))
}

fn encode_iter(pixels: impl Iterator<Item = bool>, shape: [usize; 2]) -> RleMask {
    let mut runs = Vec::new();
    let mut current = false;
    let mut count = 0u32;
    for fg in pixels {
        if fg != current {
            runs.push(count);
            count = 0;
            current = fg;
        }
        count += 1;
    }
    runs.push(count);
    RleMask { shape, runs }
}

/// Decodes to a `0/1` mask.
pub fn rle_decode(rle: &RleMask) -> Result<Vec<u8>> {
    let total: u64 = rle.runs.iter().map(|&r| u64::from(r)).sum();
    let expected = (rle.shape[0] * rle.shape[1]) as u64;
    if total != expected {
        return Err(Error::format(
            "runs",
            format!("runs sum to {total}, expected {expected}"),
        ));
    }
    let mut out = Vec::with_capacity(expected as usize);
    for (i, &r) in rle.runs.iter().enumerate() {
        let value = (i % 2) as u8;
        out.extend(std::iter::repeat_n(value, r as usize));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_background() {
        let rle = rle_encode(&[0; 6], 2, 3, 1).unwrap();
        assert_eq!(rle.runs, vec![6]);
    }

    #[test]
    fn interior_run() {
        let rle = rle_encode(&[0, 0, 2, 2, 0, 0], 2, 3, 2).unwrap();
        assert_eq!(rle.runs, vec![2, 2, 2]);
    }

    #[test]
    fn leading_foreground_gets_zero_run() {
        let rle = rle_encode(&[1, 1, 0, 1], 2, 2, 1).unwrap();
        assert_eq!(rle.runs, vec![0, 2, 1, 1]);
    }

    #[test]
    fn bad_run_total_is_format_error() {
        let rle = RleMask {
            shape: [2, 3],
            runs: vec![2, 2],
        };
        assert!(matches!(rle_decode(&rle), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let labels: Vec<u8> = (0..h * w)
                .map(|i| ((seed.rotate_left(i as u32 % 64) ^ i as u64) % 3) as u8)
                .collect();
            let rle = rle_encode(&labels, h, w, 1).unwrap();
            prop_assert_eq!(rle.runs.iter().map(|&r| r as usize).sum::<usize>(), h * w);
            let back = rle_decode(&rle).unwrap();
            let expected: Vec<u8> = labels.iter().map(|&l| u8::from(l == 1)).collect();
            prop_assert_eq!(back, expected);
        }
    }
}
