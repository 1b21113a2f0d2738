//! The rolled-out plane layout shared by triplane latents and trimasks.
//!
//! Three planes over mask dims `(X, Y, Z)` are packed into one
//! `(X + Z) × (Y + Z)` image per channel:
//!
//! ```text
//!         0..Y      Y..Y+Z
//! 0..X    xy        xz
//! X..X+Z  yzᵀ       0
//! ```

/// Height and width of the layout for mask dims `dims`.
pub fn layout_hw(dims: [usize; 3]) -> (usize, usize) {
    (dims[0] + dims[2], dims[1] + dims[2])
}

/// Packs `[C, X, Y]`, `[C, X, Z]`, `[C, Y, Z]` planes into `[C, H, W]`.
pub fn roll_out<T: Copy + Default>(xy: &[T], xz: &[T], yz: &[T], channels: usize, dims: [usize; 3]) -> Vec<T> {
    let [x, y, z] = dims;
    let (h, w) = layout_hw(dims);
    assert_eq!(xy.len(), channels * x * y);
    assert_eq!(xz.len(), channels * x * z);
    assert_eq!(yz.len(), channels * y * z);
    let mut out = vec![T::default(); channels * h * w];
    for c in 0..channels {
        let img = &mut out[c * h * w..(c + 1) * h * w];
        for i in 0..x {
            for j in 0..y {
                img[i * w + j] = xy[(c * x + i) * y + j];
            }
            for k in 0..z {
                img[i * w + y + k] = xz[(c * x + i) * z + k];
            }
        }
        for k in 0..z {
            for j in 0..y {
                img[(x + k) * w + j] = yz[(c * y + j) * z + k];
            }
        }
    }
    out
}

/// Inverse of [`roll_out`]; the unused corner block is ignored.
pub fn roll_in<T: Copy + Default>(img: &[T], channels: usize, dims: [usize; 3]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [x, y, z] = dims;
    let (h, w) = layout_hw(dims);
    assert_eq!(img.len(), channels * h * w);
    let mut xy = vec![T::default(); channels * x * y];
    let mut xz = vec![T::default(); channels * x * z];
    let mut yz = vec![T::default(); channels * y * z];
    for c in 0..channels {
        let src = &img[c * h * w..(c + 1) * h * w];
        for i in 0..x {
            for j in 0..y {
                xy[(c * x + i) * y + j] = src[i * w + j];
            }
            for k in 0..z {
                xz[(c * x + i) * z + k] = src[i * w + y + k];
            }
        }
        for k in 0..z {
            for j in 0..y {
                yz[(c * y + j) * z + k] = src[(x + k) * w + j];
            }
        }
    }
    (xy, xz, yz)
}

/// Per-cell flags marking which layout cells belong to a plane (the corner
/// block is `false`).
pub fn layout_support(dims: [usize; 3]) -> Vec<bool> {
    let [x, y, _] = dims;
    let (h, w) = layout_hw(dims);
    (0..h * w).map(|i| i / w < x || i % w < y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_zero_corner() {
        let dims = [3, 2, 2];
        let xy: Vec<i32> = (1..=12).collect();
        let xz: Vec<i32> = (101..=112).collect();
        let yz: Vec<i32> = (201..=208).collect();
        let img = roll_out(&xy, &xz, &yz, 2, dims);
        let (h, w) = layout_hw(dims);
        assert_eq!((h, w), (5, 4));
        assert_eq!(img[0..4], [1, 2, 101, 102]);
        // yz transposed: row x+k holds yz[:, k]
        assert_eq!(img[3 * 4..3 * 4 + 4], [201, 203, 0, 0]);
        assert_eq!(roll_in(&img, 2, dims), (xy, xz, yz));
        assert_eq!(layout_support(dims).iter().filter(|&&s| !s).count(), 4);
    }
}
