//! Backbone layer graphs.

use rand::Rng;

use crate::nn::{Conv2d, Linear, Op, ParamStore, ResidualBlock, Sequential, SqueezeExcite};

fn conv<R: Rng>(
    p: &mut ParamStore,
    rng: &mut R,
    name: &str,
    (cin, cout): (usize, usize),
    kernel: usize,
    stride: usize,
    groups: usize,
    bias: bool,
) -> Conv2d {
    let fan_in = cin / groups * kernel * kernel;
    let weight = p.push_he(format!("{name}.weight"), vec![cout, cin / groups, kernel, kernel], fan_in, rng);
    let bias = bias.then(|| p.push_filled(format!("{name}.bias"), vec![cout], 0.0));
    Conv2d {
        weight,
        bias,
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride,
        padding: kernel / 2,
        groups,
    }
}

fn affine(p: &mut ParamStore, name: &str, channels: usize) -> Op {
    Op::Affine {
        scale: p.push_filled(format!("{name}.scale"), vec![channels], 1.0),
        shift: p.push_filled(format!("{name}.shift"), vec![channels], 0.0),
    }
}

pub(crate) fn linear<R: Rng>(p: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Linear {
    Linear {
        weight: p.push_he(format!("{name}.weight"), vec![out_dim, in_dim], in_dim, rng),
        bias: p.push_filled(format!("{name}.bias"), vec![out_dim], 0.0),
        in_dim,
        out_dim,
    }
}

/// Four stride-2 3×3 conv + ReLU blocks: 3 → 16 → 32 → 64 → 128 channels.
/// The last two convolutions also see two coordinate channels, so the pooled
/// vector can encode where features fire. A 224 input yields a 128 × 14 × 14
/// map; about 98k parameters.
pub(crate) fn tiny_cnn<R: Rng>(p: &mut ParamStore, rng: &mut R) -> (Sequential, usize) {
    let widths = [3, 16, 32, 64, 128];
    let mut ops = Vec::new();
    for i in 0..4 {
        let mut cin = widths[i];
        if TINY_COORD_BLOCKS.contains(&i) {
            ops.push(Op::CoordChannels);
            cin += 2;
        }
        ops.push(Op::Conv(conv(
            p,
            rng,
            &format!("conv{}", i + 1),
            (cin, widths[i + 1]),
            3,
            2,
            1,
            true,
        )));
        ops.push(Op::Relu);
    }
    (Sequential::new(ops), widths[4])
}

const TINY_COORD_BLOCKS: [usize; 2] = [2, 3];

/// `(expand ratio, kernel, stride, out channels, repeats)` per stage, with
/// the 1.1 depth multiplier of the B1 variant already applied.
const B1_STAGES: [(usize, usize, usize, usize, usize); 7] = [
    (1, 3, 1, 16, 2),
    (6, 3, 2, 24, 3),
    (6, 5, 2, 40, 3),
    (6, 3, 2, 80, 4),
    (6, 5, 1, 112, 4),
    (6, 5, 2, 192, 5),
    (6, 3, 1, 320, 2),
];

/// EfficientNet-B1 convolutional base: stem, 23 MBConv blocks with
/// squeeze-excitation, 1×1 head to 1280 channels. Batch norms are folded to
/// per-channel affine maps with frozen statistics.
pub(crate) fn efficientnet_b1<R: Rng>(p: &mut ParamStore, rng: &mut R) -> (Sequential, usize) {
    let mut ops = vec![
        Op::Conv(conv(p, rng, "stem.conv", (3, 32), 3, 2, 1, false)),
        affine(p, "stem.bn", 32),
        Op::Silu,
    ];
    let mut cin = 32;
    let mut idx = 0;
    for &(expand, k, stride, cout, repeats) in &B1_STAGES {
        for r in 0..repeats {
            let s = if r == 0 { stride } else { 1 };
            let name = format!("blocks.{idx}");
            let mid = cin * expand;
            let mut body = Vec::new();
            if expand != 1 {
                body.push(Op::Conv(conv(p, rng, &format!("{name}.expand"), (cin, mid), 1, 1, 1, false)));
                body.push(affine(p, &format!("{name}.expand_bn"), mid));
                body.push(Op::Silu);
            }
            body.push(Op::Conv(conv(p, rng, &format!("{name}.dw"), (mid, mid), k, s, mid, false)));
            body.push(affine(p, &format!("{name}.dw_bn"), mid));
            body.push(Op::Silu);
            let squeezed = (cin / 4).max(1);
            body.push(Op::SqueezeExcite(SqueezeExcite {
                reduce: linear(p, rng, &format!("{name}.se_reduce"), mid, squeezed),
                expand: linear(p, rng, &format!("{name}.se_expand"), squeezed, mid),
            }));
            body.push(Op::Conv(conv(p, rng, &format!("{name}.project"), (mid, cout), 1, 1, 1, false)));
            body.push(affine(p, &format!("{name}.project_bn"), cout));
            ops.push(Op::Residual(ResidualBlock {
                body: Sequential::new(body),
                skip: s == 1 && cin == cout,
            }));
            cin = cout;
            idx += 1;
        }
    }
    ops.push(Op::Conv(conv(p, rng, "head.conv", (cin, 1280), 1, 1, 1, false)));
    ops.push(affine(p, "head.bn", 1280));
    ops.push(Op::Silu);
    (Sequential::new(ops), 1280)
}
