//! Adaptive cropping strategy: cut an arbitrary-size image into four
//! overlapping corner-anchored patches whose sides are divisible by 4, run
//! the same-size model on each, and paste the outputs back while discarding
//! the overlap increments.
//!
//! For a dimension of length `L` and a preset `padding = 4k`, the increment
//! is `dl = padding - (floor(L/2) + padding) % 4`, which makes the patch
//! side `floor(L/2) + dl` divisible by 4 and leaves `0 < dl <= padding` of
//! overlap. Top/left tiles own output rows/cols `[0, floor(L/2))`;
//! bottom/right tiles own the remainder, so the four paste rectangles
//! partition the output exactly.

use thiserror::Error;

use crate::model::{ArchKind, ModelError, ModelGraph};
use crate::parallel::map_indexed;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TileError {
    #[error("padding {0} must be a positive multiple of 4")]
    BadPadding(usize),
    #[error(
        "patch side {patch} exceeds image extent {len}; use a smaller padding or a larger image"
    )]
    PatchExceedsImage { patch: usize, len: usize },
    #[error("tiled inference requires a same-size (IMDN_AS) model")]
    WrongModelKind,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Source and paste geometry for one of the four patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileSpec {
    /// Crop rectangle in input coordinates: `(row0, col0, height, width)`.
    pub src: (usize, usize, usize, usize),
    /// Paste rectangle in output coordinates: `(row0, col0, height, width)`.
    pub paste: (usize, usize, usize, usize),
    /// Rows/cols of the patch output to skip before pasting.
    pub crop_offset: (usize, usize),
}

/// Extra increments `(dl_h, dl_w)` making both patch sides divisible by 4.
pub fn compute_increments(
    h: usize,
    w: usize,
    padding: usize,
) -> Result<(usize, usize), TileError> {
    if padding == 0 || padding % 4 != 0 {
        return Err(TileError::BadPadding(padding));
    }
    let incr = |len: usize| -> Result<usize, TileError> {
        let dl = padding - (len / 2 + padding) % 4;
        let patch = len / 2 + dl;
        if patch > len {
            return Err(TileError::PatchExceedsImage { patch, len });
        }
        Ok(dl)
    };
    Ok((incr(h)?, incr(w)?))
}

/// The four corner-anchored tiles for an `h x w` image.
pub fn compute_tiles(h: usize, w: usize, padding: usize) -> Result<[TileSpec; 4], TileError> {
    let (dl_h, dl_w) = compute_increments(h, w, padding)?;
    let ph = h / 2 + dl_h;
    let pw = w / 2 + dl_w;
    let top_rows = h / 2;
    let left_cols = w / 2;

    // per-axis source anchor, paste extent and local offset
    let axis = |len: usize, patch: usize, split: usize, second: bool| -> (usize, usize, usize, usize) {
        if second {
            let src0 = len - patch;
            (src0, split, len - split, split - src0)
        } else {
            (0, 0, split, 0)
        }
    };

    let mut tiles = [TileSpec {
        src: (0, 0, 0, 0),
        paste: (0, 0, 0, 0),
        crop_offset: (0, 0),
    }; 4];
    for (i, (bottom, right)) in [(false, false), (false, true), (true, false), (true, true)]
        .into_iter()
        .enumerate()
    {
        let (src_r, paste_r, paste_h, off_r) = axis(h, ph, top_rows, bottom);
        let (src_c, paste_c, paste_w, off_c) = axis(w, pw, left_cols, right);
        tiles[i] = TileSpec {
            src: (src_r, src_c, ph, pw),
            paste: (paste_r, paste_c, paste_h, paste_w),
            crop_offset: (off_r, off_c),
        };
    }
    Ok(tiles)
}

/// Result of tiled super-resolution.
pub struct TiledOutput {
    pub output: Tensor,
    /// Largest absolute disagreement between the owning tile and the tile
    /// across the seam, measured on the rows/columns adjacent to the paste
    /// boundaries. Zero when the model's receptive field fits the overlap.
    pub seam_max_abs: f64,
}

/// Forward each tile through a same-size model and paste the outputs.
///
/// The four tile forwards are independent and run in parallel against the
/// shared immutable model; pasting is serialized in tile order onto disjoint
/// regions, so the result does not depend on scheduling.
pub fn super_resolve_tiled(
    input: &Tensor,
    model: &ModelGraph,
    padding: usize,
) -> Result<TiledOutput, TileError> {
    if model.kind != ArchKind::ImdnAs {
        return Err(TileError::WrongModelKind);
    }
    let [n, c, h, w] = input.shape();
    let tiles = compute_tiles(h, w, padding)?;

    let outputs = map_indexed(4, |i| {
        let (r0, c0, th, tw) = tiles[i].src;
        let patch = input.crop_spatial(r0, c0, th, tw);
        model.forward(&patch)
    });
    let mut tile_outs = Vec::with_capacity(4);
    for out in outputs {
        tile_outs.push(out?);
    }

    let mut output = Tensor::zeros(n, c, h, w);
    for (tile, out) in tiles.iter().zip(&tile_outs) {
        let (pr, pc, ph, pw) = tile.paste;
        let (or, oc) = tile.crop_offset;
        for ni in 0..n {
            for ci in 0..c {
                let src = out.plane(ni, ci);
                let tile_w = out.width();
                let dst = output.plane_mut(ni, ci);
                for r in 0..ph {
                    let srow = (or + r) * tile_w + oc;
                    let drow = (pr + r) * w + pc;
                    dst[drow..drow + pw].copy_from_slice(&src[srow..srow + pw]);
                }
            }
        }
    }

    let seam_max_abs = seam_disagreement(h, w, &tiles, &tile_outs);
    Ok(TiledOutput {
        output,
        seam_max_abs,
    })
}

/// Max |owner - neighbor| prediction difference on the seam lines.
///
/// Tiles are ordered `[top-left, top-right, bottom-left, bottom-right]`:
/// bit 0 of the index selects the column side, bit 1 the row side. For each
/// pixel on the two rows (columns) around the horizontal (vertical) seam,
/// the owning tile's value is compared with the prediction of the tile
/// across that seam, when its source rectangle covers the pixel. Discarded
/// predictions this close to the seam sit a full increment away from their
/// tile's cut edge, so the comparison is not polluted by tile-border
/// effects.
fn seam_disagreement(h: usize, w: usize, tiles: &[TileSpec; 4], outs: &[Tensor]) -> f64 {
    let split_r = h / 2;
    let split_c = w / 2;
    let value_at = |idx: usize, n: usize, ch: usize, r: usize, c: usize| -> Option<f64> {
        let (sr, sc, sh, sw) = tiles[idx].src;
        if r >= sr && r < sr + sh && c >= sc && c < sc + sw {
            Some(outs[idx].at(n, ch, r - sr, c - sc))
        } else {
            None
        }
    };
    let owner_of = |r: usize, c: usize| -> usize {
        usize::from(c >= split_c) | (usize::from(r >= split_r) << 1)
    };
    let [n, channels, _, _] = outs[0].shape();
    let mut worst = 0.0f64;
    let mut probe = |r: usize, c: usize, across_bit: usize| {
        let owner = owner_of(r, c);
        let other = owner ^ across_bit;
        for ni in 0..n {
            for ci in 0..channels {
                if let (Some(a), Some(b)) =
                    (value_at(owner, ni, ci, r, c), value_at(other, ni, ci, r, c))
                {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    };
    if split_r >= 1 {
        for r in [split_r - 1, split_r] {
            for c in 0..w {
                probe(r, c, 0b10);
            }
        }
    }
    if split_c >= 1 {
        for c in [split_c - 1, split_c] {
            for r in 0..h {
                probe(r, c, 0b01);
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_imdn_as, init_weights, ImdnConfig};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn increment_examples() {
        // remainder 2 case
        assert_eq!(compute_increments(100, 100, 4).unwrap(), (2, 2));
        // zero remainder gets the full padding
        assert_eq!(compute_increments(96, 96, 4).unwrap(), (4, 4));
        // degenerate: the patch spans the whole dimension
        assert_eq!(compute_increments(8, 8, 4).unwrap(), (4, 4));
    }

    #[test]
    fn increment_rejects_bad_padding_and_tiny_images() {
        assert!(matches!(compute_increments(64, 64, 3), Err(TileError::BadPadding(3))));
        assert!(matches!(compute_increments(64, 64, 0), Err(TileError::BadPadding(0))));
        // 3/2 = 1, dl = 3, patch 4 exceeds the dimension
        assert!(matches!(
            compute_increments(3, 64, 4),
            Err(TileError::PatchExceedsImage { .. })
        ));
        // a larger padding can also push the patch past the image: 8/2 + 8
        assert!(matches!(
            compute_increments(8, 64, 8),
            Err(TileError::PatchExceedsImage { .. })
        ));
    }

    #[test]
    fn tiles_for_even_square() {
        let tiles = compute_tiles(100, 100, 4).unwrap();
        for t in &tiles {
            assert_eq!((t.src.2, t.src.3), (52, 52));
            assert_eq!(t.src.2 % 4, 0);
        }
        assert_eq!(tiles[0].paste, (0, 0, 50, 50));
        assert_eq!(tiles[0].crop_offset, (0, 0));
        // bottom-right tile starts at 48 and discards its first two rows/cols
        assert_eq!(tiles[3].src, (48, 48, 52, 52));
        assert_eq!(tiles[3].paste, (50, 50, 50, 50));
        assert_eq!(tiles[3].crop_offset, (2, 2));
    }

    #[test]
    fn tiles_for_odd_square() {
        let tiles = compute_tiles(101, 101, 4).unwrap();
        for t in &tiles {
            assert_eq!((t.src.2, t.src.3), (52, 52));
        }
        // bottom tiles paste 51 rows [50, 101) and discard their first row
        assert_eq!(tiles[2].src.0, 49);
        assert_eq!(tiles[2].paste.0, 50);
        assert_eq!(tiles[2].paste.2, 51);
        assert_eq!(tiles[2].crop_offset.0, 1);
    }

    /// Paint tile indices; every output pixel must be covered exactly once.
    fn assert_partition(h: usize, w: usize, padding: usize) {
        let tiles = compute_tiles(h, w, padding).unwrap();
        let mut cover = vec![0u8; h * w];
        for t in &tiles {
            let (r0, c0, ph, pw) = t.paste;
            assert!(r0 + ph <= h && c0 + pw <= w);
            for r in r0..r0 + ph {
                for c in c0..c0 + pw {
                    cover[r * w + c] += 1;
                }
            }
            // pasted pixels must come from the tile interior
            let (sr, sc, sh, sw) = t.src;
            let (or, oc) = t.crop_offset;
            assert!(or + ph <= sh && oc + pw <= sw);
            assert_eq!(sr + or, r0, "paste rows misaligned with source");
            assert_eq!(sc + oc, c0, "paste cols misaligned with source");
        }
        assert!(cover.iter().all(|&v| v == 1), "{h}x{w} padding {padding}");
    }

    #[test]
    fn paste_rects_partition_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let h = rng.gen_range(8..=500);
            let w = rng.gen_range(8..=500);
            for padding in [4usize, 8, 12] {
                let ph = h / 2 + padding;
                let pw = w / 2 + padding;
                if ph > h || pw > w {
                    continue; // degenerate sizes where this padding cannot fit
                }
                assert_partition(h, w, padding);
            }
        }
        // the boundary spec sizes
        assert_partition(8, 8, 4);
        assert_partition(101, 77, 4);
    }

    #[test]
    fn divisibility_holds_for_all_tiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..300 {
            let h = rng.gen_range(8..=500);
            let w = rng.gen_range(8..=500);
            let padding = [4usize, 8, 12][rng.gen_range(0..3)];
            match compute_tiles(h, w, padding) {
                Ok(tiles) => {
                    for t in &tiles {
                        assert_eq!(t.src.2 % 4, 0);
                        assert_eq!(t.src.3 % 4, 0);
                    }
                }
                Err(TileError::PatchExceedsImage { .. }) => {} // small image, large padding
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
    }

    #[test]
    fn overlap_grows_with_padding() {
        // overlap along an axis is patch + patch - len
        let mut prev = 0usize;
        for padding in [4usize, 8, 12, 16] {
            let (dl, _) = compute_increments(200, 200, padding).unwrap();
            let patch = 100 + dl;
            let overlap = 2 * patch - 200;
            assert!(overlap >= prev);
            prev = overlap;
        }
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            [1, 3, h, w],
            (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
    }

    #[test]
    fn tiled_output_has_input_size_for_odd_dims() {
        let mut cfg = ImdnConfig::tiny(1, 8, 1);
        cfg.use_cca = false;
        let mut model = build_imdn_as(cfg).unwrap();
        init_weights(&mut model, 3);
        let input = random_image(3, 101, 77);
        let tiled = super_resolve_tiled(&input, &model, 4).unwrap();
        assert_eq!(tiled.output.shape(), [1, 3, 101, 77]);
    }

    #[test]
    fn tile_order_does_not_matter() {
        // paste regions are disjoint, so permuting tiles cannot change the
        // pasted result; verify by comparing against a manual reversed paste
        let mut cfg = ImdnConfig::tiny(1, 8, 1);
        cfg.use_cca = false;
        let mut model = build_imdn_as(cfg).unwrap();
        init_weights(&mut model, 5);
        let input = random_image(7, 64, 48);

        let tiles = compute_tiles(64, 48, 4).unwrap();
        let forward_tile = |t: &TileSpec| {
            let (r0, c0, th, tw) = t.src;
            model.forward(&input.crop_spatial(r0, c0, th, tw)).unwrap()
        };
        let mut forward_order = Tensor::zeros(1, 3, 64, 48);
        let mut reverse_order = Tensor::zeros(1, 3, 64, 48);
        let paste = |dst: &mut Tensor, t: &TileSpec, out: &Tensor| {
            let (pr, pc, ph, pw) = t.paste;
            let (or, oc) = t.crop_offset;
            for ci in 0..3 {
                for r in 0..ph {
                    for c in 0..pw {
                        let v = out.at(0, ci, or + r, oc + c);
                        dst.set(0, ci, pr + r, pc + c, v);
                    }
                }
            }
        };
        let outs: Vec<Tensor> = tiles.iter().map(forward_tile).collect();
        for (t, o) in tiles.iter().zip(&outs) {
            paste(&mut forward_order, t, o);
        }
        for (t, o) in tiles.iter().zip(&outs).rev() {
            paste(&mut reverse_order, t, o);
        }
        assert_eq!(forward_order, reverse_order);

        let tiled = super_resolve_tiled(&input, &model, 4).unwrap();
        assert_eq!(tiled.output, forward_order);
    }

    #[test]
    fn tiled_equals_whole_when_receptive_field_fits() {
        use crate::analysis::{receptive_field, ReceptiveField};

        // 1-block model without attention: bounded receptive field
        let mut cfg = ImdnConfig::tiny(1, 8, 1);
        cfg.use_cca = false;
        let mut model = build_imdn_as(cfg).unwrap();
        init_weights(&mut model, 11);

        let radius = match receptive_field(&model) {
            ReceptiveField::Bounded(r) => r,
            ReceptiveField::Global => panic!("model should be bounded"),
        };
        // trunk pixels live on a 4-aligned grid, so an output pixel can sit
        // up to 3 pixels past its trunk center; the overlap must absorb the
        // radius plus that offset. On 104x104, floor(104/2) = 52 is already
        // divisible by 4, so dl = padding and tile anchors stay 4-aligned.
        let padding = (radius + 3).div_ceil(4) * 4;
        let input = random_image(13, 104, 104);
        let whole = model.forward(&input).unwrap();
        let tiled = super_resolve_tiled(&input, &model, padding).unwrap();
        let diff = whole.max_abs_diff(&tiled.output);
        assert!(diff <= 1e-9, "max diff {diff} with radius {radius} padding {padding}");
        assert!(tiled.seam_max_abs <= 1e-9);
    }

    #[test]
    fn rejects_upsampling_model() {
        let model = crate::model::build_imdn(ImdnConfig::tiny(1, 8, 2)).unwrap();
        let input = random_image(1, 32, 32);
        assert!(matches!(
            super_resolve_tiled(&input, &model, 4),
            Err(TileError::WrongModelKind)
        ));
    }
}
