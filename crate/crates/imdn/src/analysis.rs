//! Parameter and multiply-accumulate accounting over a built model graph.
//!
//! Parameters per convolution are `in * out * k^2` weights plus `out`
//! biases. MACs are counted per unit of high-resolution pixel area: each
//! layer contributes `in * out * k^2 / d^2`, where `d` is its operating
//! resolution divisor relative to the HR raster. Bias additions are not
//! MACs and are excluded. Attention-branch 1x1 convolutions are charged at
//! the resolution of the block they sit in; that is the convention the
//! published coefficients follow.

use crate::model::{ArchKind, ModelGraph};

/// One row of the cost breakdown.
#[derive(Debug, Clone)]
pub struct CostRow {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Squared divisor of this layer's operating resolution relative to the
    /// HR raster (the layer runs on an `m/d x m/d` grid for an `m x m`
    /// output; this field is `d^2`).
    pub hr_area_div: usize,
    pub params: usize,
    /// Coefficient of `m^2` contributed by this layer.
    pub macs_coeff: f64,
    pub trunk: bool,
}

/// Cost breakdown for a whole model.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub total_params: usize,
    /// MACs per HR pixel: the coefficient of `m^2`.
    pub macs_per_hr_pixel: f64,
    /// Convolutions on the longest serial trunk path.
    pub trunk_depth: usize,
    /// Longest chain inside a single attention branch.
    pub attention_depth: usize,
}

impl CostReport {
    /// Round half away from zero to the nearest thousand, as the published
    /// tables do.
    pub fn params_k(&self) -> u64 {
        round_k(self.total_params as f64)
    }

    pub fn macs_k(&self) -> u64 {
        round_k(self.macs_per_hr_pixel)
    }

    /// Parameters in millions, one decimal.
    pub fn params_m(&self) -> f64 {
        (self.total_params as f64 / 100_000.0).round() / 10.0
    }
}

pub fn round_k(v: f64) -> u64 {
    (v / 1000.0).round() as u64
}

/// Total learnable parameters over all convolution layers.
pub fn count_params(model: &ModelGraph) -> usize {
    model.param_count()
}

/// MACs per HR pixel (the `m^2` coefficient).
pub fn count_macs(model: &ModelGraph) -> f64 {
    analyze(model).macs_per_hr_pixel
}

/// Convolution layers on the longest input-to-output chain; attention
/// branches are excluded and reported separately in [`CostReport`].
pub fn depth(model: &ModelGraph) -> usize {
    analyze(model).trunk_depth
}

/// Full per-layer breakdown.
pub fn analyze(model: &ModelGraph) -> CostReport {
    // For IMDN the whole network runs at LR resolution m/s; for IMDN_AS the
    // input already has HR size and the downsampling convs divide it further.
    let input_div = match model.kind {
        ArchKind::Imdn => model.config.scale,
        ArchKind::ImdnAs => 1,
    };
    let mut rows = Vec::with_capacity(model.slots().len());
    let mut total_params = 0usize;
    let mut macs = 0.0f64;
    let mut trunk_depth = 0usize;
    for slot in model.slots() {
        let layer = &slot.layer;
        let d = input_div * slot.res_div;
        let area_div = d * d;
        let params = layer.param_count();
        let coeff = (layer.in_channels() * layer.out_channels() * layer.kernel() * layer.kernel())
            as f64
            / area_div as f64;
        total_params += params;
        macs += coeff;
        if slot.trunk {
            trunk_depth += 1;
        }
        rows.push(CostRow {
            name: slot.name.clone(),
            in_channels: layer.in_channels(),
            out_channels: layer.out_channels(),
            kernel: layer.kernel(),
            hr_area_div: area_div,
            params,
            macs_coeff: coeff,
            trunk: slot.trunk,
        });
    }
    let attention_depth = if model.config.use_cca { 2 } else { 0 };
    CostReport {
        rows,
        total_params,
        macs_per_hr_pixel: macs,
        trunk_depth,
        attention_depth,
    }
}

/// Outcome of tracing how far one output pixel can see into the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReceptiveField {
    /// Radius in input pixels.
    Bounded(usize),
    /// A global pooling step makes every output depend on every input.
    Global,
}

/// Receptive radius of the full forward pass at input resolution.
///
/// Contrast-aware attention pools over the whole feature map, so any model
/// with CCA enabled is [`ReceptiveField::Global`]. Otherwise each trunk
/// convolution of kernel `k` adds `(k-1)/2` times the accumulated stride
/// product.
pub fn receptive_field(model: &ModelGraph) -> ReceptiveField {
    if model.config.use_cca {
        return ReceptiveField::Global;
    }
    let mut radius = 0usize;
    let mut stride_product = 1usize;
    for slot in model.slots() {
        if !slot.trunk {
            continue;
        }
        radius += (slot.layer.kernel() - 1) / 2 * stride_product;
        stride_product *= slot.layer.stride;
    }
    ReceptiveField::Bounded(radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_ablation, build_imdn, build_imdn_as, AblationVariant, ImdnConfig};

    #[test]
    fn single_layer_params() {
        let m = build_imdn(ImdnConfig::with_scale(2)).unwrap();
        let fea = m.layer("fea_conv").unwrap();
        assert_eq!(fea.param_count(), 1792); // 3*64*9 + 64
    }

    #[test]
    fn imdn_param_totals_per_scale() {
        for (scale, expect) in [(2, 694_404), (3, 703_059), (4, 715_176)] {
            let m = build_imdn(ImdnConfig::with_scale(scale)).unwrap();
            assert_eq!(count_params(&m), expect, "scale {scale}");
        }
        // rounding matches the published 694K / 703K / 715K
        for (scale, k) in [(2, 694), (3, 703), (4, 715)] {
            let m = build_imdn(ImdnConfig::with_scale(scale)).unwrap();
            assert_eq!(analyze(&m).params_k(), k);
        }
    }

    #[test]
    fn block_and_cca_param_decomposition() {
        let m = build_imdn(ImdnConfig::with_scale(4)).unwrap();
        let layer_params = |name: &str| m.layer(name).unwrap().param_count();
        assert_eq!(layer_params("block1.c1"), 36_928);
        assert_eq!(layer_params("block1.c2"), 27_712);
        assert_eq!(layer_params("block1.c3"), 27_712);
        assert_eq!(layer_params("block1.c4"), 6_928);
        assert_eq!(
            layer_params("block1.cca_down") + layer_params("block1.cca_up"),
            580
        );
        assert_eq!(layer_params("block1.c5"), 4_160);
        let block_total: usize = m
            .slots()
            .iter()
            .filter(|s| s.name.starts_with("block1."))
            .map(|s| s.layer.param_count())
            .sum();
        assert_eq!(block_total, 104_020);
    }

    #[test]
    fn ablation_param_totals() {
        let cases = [
            (AblationVariant::Plain3ConvB4, 509_552, 510),
            (AblationVariant::BasicB4, 480_176, 480),
            (AblationVariant::BasicB4Cca, 482_496, 482),
            (AblationVariant::B4CcaIic, 498_944, 499),
        ];
        for (variant, exact, k) in cases {
            let m = build_ablation(variant, 4).unwrap();
            assert_eq!(count_params(&m), exact, "{variant:?}");
            assert_eq!(analyze(&m).params_k(), k, "{variant:?}");
        }
    }

    #[test]
    fn mac_coefficients_per_scale() {
        let expect = [
            (2, 692_160.0 / 4.0, 173),
            (3, 700_800.0 / 9.0, 78),
            (4, 712_896.0 / 16.0, 45),
        ];
        for (scale, exact, k) in expect {
            let m = build_imdn(ImdnConfig::with_scale(scale)).unwrap();
            let report = analyze(&m);
            assert!(
                (report.macs_per_hr_pixel - exact).abs() < 1e-6,
                "scale {scale}: {} vs {exact}",
                report.macs_per_hr_pixel
            );
            assert_eq!(report.macs_k(), k, "scale {scale}");
        }
    }

    #[test]
    fn depth_is_34_for_imdn() {
        let m = build_imdn(ImdnConfig::with_scale(4)).unwrap();
        let report = analyze(&m);
        assert_eq!(report.trunk_depth, 34);
        assert_eq!(report.attention_depth, 2);
        assert_eq!(report.params_m(), 0.7);
    }

    #[test]
    fn depth_of_other_variants() {
        // fea + 4 blocks * 3 convs + lr + up
        let m = build_ablation(AblationVariant::Plain3ConvB4, 4).unwrap();
        assert_eq!(depth(&m), 15);
        // fea + 4 * (4 prm + c5) + lr + up
        let m = build_ablation(AblationVariant::BasicB4, 4).unwrap();
        assert_eq!(depth(&m), 23);
        // + fusion
        let m = build_ablation(AblationVariant::B4CcaIic, 4).unwrap();
        assert_eq!(depth(&m), 24);
        // 2 downs + 6 * 5 + fusion + lr + up
        let m = build_imdn_as(ImdnConfig::default()).unwrap();
        assert_eq!(depth(&m), 35);
    }

    #[test]
    fn structural_double_entry_check() {
        // analyzer total equals the sum of allocated array lengths
        for scale in [2, 3, 4] {
            let m = build_imdn(ImdnConfig::with_scale(scale)).unwrap();
            let allocated: usize = m
                .slots()
                .iter()
                .map(|s| s.layer.weights.numel() + s.layer.bias.len())
                .sum();
            assert_eq!(count_params(&m), allocated);
        }
    }

    #[test]
    fn macs_scale_linearly_with_blocks() {
        // doubling the block count doubles the coefficient minus head/tail
        let six = analyze(&build_imdn(ImdnConfig::with_scale(4)).unwrap());
        let twelve = analyze(
            &build_imdn(ImdnConfig {
                num_blocks: 12,
                ..ImdnConfig::with_scale(4)
            })
            .unwrap(),
        );
        let head_tail = |r: &CostReport| -> f64 {
            r.rows
                .iter()
                .filter(|row| !row.name.starts_with("block") && row.name != "fusion")
                .map(|row| row.macs_coeff)
                .sum()
        };
        let six_blocks = six.macs_per_hr_pixel - head_tail(&six) - fusion_coeff(&six);
        let twelve_blocks = twelve.macs_per_hr_pixel - head_tail(&twelve) - fusion_coeff(&twelve);
        assert!((twelve_blocks - 2.0 * six_blocks).abs() < 1e-9);

        fn fusion_coeff(r: &CostReport) -> f64 {
            r.rows
                .iter()
                .find(|row| row.name == "fusion")
                .map(|row| row.macs_coeff)
                .unwrap_or(0.0)
        }
    }

    #[test]
    fn receptive_field_walk() {
        // single conv model surrogate: 1-block no-CCA IMDN_AS
        let mut cfg = ImdnConfig::tiny(1, 8, 1);
        cfg.use_cca = false;
        let m = build_imdn_as(cfg).unwrap();
        // down1 r=1*1, down2 r=1*2, then at stride product 4:
        // c1..c4 and lr_conv and up_conv each add 4
        assert_eq!(receptive_field(&m), ReceptiveField::Bounded(1 + 2 + 6 * 4));

        let m = build_imdn_as(ImdnConfig::tiny(1, 8, 1)).unwrap();
        assert_eq!(receptive_field(&m), ReceptiveField::Global);
    }
}
