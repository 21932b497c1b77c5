//! Registry of convolutional feature extractors and their graph builders.
//!
//! Layer names follow the Keras application models so that converted
//! ImageNet weights can be loaded by name (see [`crate::weights`]).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Graph, NodeId, Padding, Pads, PoolKind, Shape};
use crate::scalar::Scalar;

/// Pixel mapping applied before the network sees an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `v / 127.5 - 1`, RGB order; values in `[-1, 1]`.
    SymmetricUnit,
    /// Channels reordered to BGR and the ImageNet channel mean subtracted; no scaling.
    CaffeBgr,
}

const CAFFE_MEAN_BGR: [f64; 3] = [103.939, 116.779, 123.68];

impl Normalization {
    /// Maps one RGB pixel to the three model-input channels, in channel order.
    pub fn apply(self, rgb: [u8; 3]) -> [f64; 3] {
        match self {
            Normalization::SymmetricUnit => rgb.map(|v| v as f64 / 127.5 - 1.0),
            Normalization::CaffeBgr => [
                rgb[2] as f64 - CAFFE_MEAN_BGR[0],
                rgb[1] as f64 - CAFFE_MEAN_BGR[1],
                rgb[0] as f64 - CAFFE_MEAN_BGR[2],
            ],
        }
    }

    /// Closed interval containing every value `apply` can produce.
    pub fn value_range(self) -> (f64, f64) {
        match self {
            Normalization::SymmetricUnit => (-1.0, 1.0),
            Normalization::CaffeBgr => (-CAFFE_MEAN_BGR[2], 255.0 - CAFFE_MEAN_BGR[0]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Normalization::SymmetricUnit => "symmetric_unit",
            Normalization::CaffeBgr => "caffe_bgr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    MobileNet,
    MobileNetV2,
    InceptionV3,
    InceptionResNetV2,
    ResNet50,
    Xception,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneEntry {
    pub id: &'static str,
    pub display_name: &'static str,
    pub input_size: (usize, usize),
    pub normalization: Normalization,
    pub feature_dim: usize,
    pub architecture: Architecture,
}

impl BackboneEntry {
    pub fn input_shape(&self) -> Shape {
        Shape::new(3, self.input_size.0, self.input_size.1)
    }
}

pub static REGISTRY: [BackboneEntry; 6] = [
    BackboneEntry {
        id: "mobilenet",
        display_name: "MobileNet",
        input_size: (224, 224),
        normalization: Normalization::SymmetricUnit,
        feature_dim: 1024,
        architecture: Architecture::MobileNet,
    },
    BackboneEntry {
        id: "inception_v3",
        display_name: "Inception V3",
        input_size: (299, 299),
        normalization: Normalization::SymmetricUnit,
        feature_dim: 2048,
        architecture: Architecture::InceptionV3,
    },
    BackboneEntry {
        id: "inception_resnet_v2",
        display_name: "InceptionResNet V2",
        input_size: (299, 299),
        normalization: Normalization::SymmetricUnit,
        feature_dim: 1536,
        architecture: Architecture::InceptionResNetV2,
    },
    BackboneEntry {
        id: "resnet50",
        display_name: "ResNet 50",
        input_size: (224, 224),
        normalization: Normalization::CaffeBgr,
        feature_dim: 2048,
        architecture: Architecture::ResNet50,
    },
    BackboneEntry {
        id: "mobilenet_v2",
        display_name: "MobileNet V2",
        input_size: (224, 224),
        normalization: Normalization::SymmetricUnit,
        feature_dim: 1280,
        architecture: Architecture::MobileNetV2,
    },
    BackboneEntry {
        id: "xception",
        display_name: "Xception",
        input_size: (299, 299),
        normalization: Normalization::SymmetricUnit,
        feature_dim: 2048,
        architecture: Architecture::Xception,
    },
];

pub fn lookup(id: &str) -> Option<&'static BackboneEntry> {
    REGISTRY.iter().find(|e| e.id == id)
}

pub fn ids() -> impl Iterator<Item = &'static str> {
    REGISTRY.iter().map(|e| e.id)
}

/// Builds the feature extractor into a fresh graph; returns the graph and
/// the node producing the final spatial feature map (before pooling).
pub fn build<T: Scalar>(entry: &BackboneEntry, rng: &mut ChaCha8Rng) -> (Graph<T>, NodeId) {
    let mut g = Graph::new(entry.input_shape());
    let mut b = Builder { g: &mut g, rng };
    let out = match entry.architecture {
        Architecture::MobileNet => mobilenet(&mut b),
        Architecture::MobileNetV2 => mobilenet_v2(&mut b),
        Architecture::InceptionV3 => inception_v3(&mut b),
        Architecture::InceptionResNetV2 => inception_resnet_v2(&mut b),
        Architecture::ResNet50 => resnet50(&mut b),
        Architecture::Xception => xception(&mut b),
    };
    (g, out)
}

struct Builder<'a, T> {
    g: &'a mut Graph<T>,
    rng: &'a mut ChaCha8Rng,
}

const S1: (usize, usize) = (1, 1);
const S2: (usize, usize) = (2, 2);
const K1: (usize, usize) = (1, 1);
const K3: (usize, usize) = (3, 3);

impl<T: Scalar> Builder<'_, T> {
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, x: NodeId, f: usize, k: (usize, usize), s: (usize, usize), pad: Padding, bias: bool) -> NodeId {
        self.g.conv(self.rng, name, x, f, k, s, pad, bias)
    }

    fn dw(&mut self, name: &str, x: NodeId, s: (usize, usize), pad: Padding) -> NodeId {
        self.g.depthwise(self.rng, name, x, K3, s, pad, false)
    }

    fn bn(&mut self, name: &str, x: NodeId, eps: f64) -> NodeId {
        self.g.batch_norm(name, x, eps)
    }

    fn relu(&mut self, name: &str, x: NodeId) -> NodeId {
        self.g.act(name, x, Activation::Relu)
    }

    fn relu6(&mut self, name: &str, x: NodeId) -> NodeId {
        self.g.act(name, x, Activation::Relu6)
    }

    /// Keras `conv2d_bn` used by the Inception family: conv (no bias) + BN
    /// without a learned scale + ReLU.
    fn conv_bn(&mut self, name: &str, x: NodeId, f: usize, k: (usize, usize), s: (usize, usize), pad: Padding) -> NodeId {
        let c = self.conv(&format!("{name}_conv"), x, f, k, s, pad, false);
        let b = self.g.batch_norm_with(&format!("{name}_bn"), c, 1e-3, true);
        self.relu(&format!("{name}_ac"), b)
    }

    fn separable(&mut self, name: &str, x: NodeId, f: usize) -> NodeId {
        let d = self.g.depthwise(self.rng, &format!("{name}/depthwise"), x, K3, S1, Padding::Same, false);
        self.conv(&format!("{name}/pointwise"), d, f, K1, S1, Padding::Valid, false)
    }
}

fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = (((v + d / 2.0) / d).floor() * d).max(d);
    if new_v < 0.9 * v {
        new_v += d;
    }
    new_v as usize
}

fn mobilenet<T: Scalar>(b: &mut Builder<'_, T>) -> NodeId {
    let mut x = b.conv("conv1", Graph::<T>::INPUT, 32, K3, S2, Padding::Same, false);
    x = b.bn("conv1_bn", x, 1e-3);
    x = b.relu6("conv1_relu", x);
    let blocks: [(usize, usize); 13] = [
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    ];
    for (i, (filters, stride)) in blocks.into_iter().enumerate() {
        let id = i + 1;
        let s = (stride, stride);
        x = b.dw(&format!("conv_dw_{id}"), x, s, Padding::Same);
        x = b.bn(&format!("conv_dw_{id}_bn"), x, 1e-3);
        x = b.relu6(&format!("conv_dw_{id}_relu"), x);
        x = b.conv(&format!("conv_pw_{id}"), x, filters, K1, S1, Padding::Valid, false);
        x = b.bn(&format!("conv_pw_{id}_bn"), x, 1e-3);
        x = b.relu6(&format!("conv_pw_{id}_relu"), x);
    }
    x
}

fn mobilenet_v2<T: Scalar>(b: &mut Builder<'_, T>) -> NodeId {
    let mut x = b.conv("Conv1", Graph::<T>::INPUT, 32, K3, S2, Padding::Same, false);
    x = b.bn("bn_Conv1", x, 1e-3);
    x = b.relu6("Conv1_relu", x);

    let settings: [(usize, usize, usize, usize); 7] = [
        // (filters, stride, expansion, repeats)
        (16, 1, 1, 1),
        (24, 2, 6, 2),
        (32, 2, 6, 3),
        (64, 2, 6, 4),
        (96, 1, 6, 3),
        (160, 2, 6, 3),
        (320, 1, 6, 1),
    ];
    let mut block_id = 0;
    for (filters, stride, expansion, repeats) in settings {
        for r in 0..repeats {
            let s = if r == 0 { stride } else { 1 };
            x = inverted_residual(b, x, filters, s, expansion, block_id);
            block_id += 1;
        }
    }
    x = b.conv("Conv_1", x, 1280, K1, S1, Padding::Valid, false);
    x = b.bn("Conv_1_bn", x, 1e-3);
    b.relu6("out_relu", x)
}

fn inverted_residual<T: Scalar>(
    b: &mut Builder<'_, T>,
    input: NodeId,
    filters: usize,
    stride: usize,
    expansion: usize,
    block_id: usize,
) -> NodeId {
    let in_c = b.g.shape(input).c;
    let out_c = make_divisible(filters as f64, 8);
    let prefix = if block_id == 0 { "expanded_conv_".to_string() } else { format!("block_{block_id}_") };
    let mut x = input;
    if block_id > 0 {
        x = b.conv(&format!("{prefix}expand"), x, expansion * in_c, K1, S1, Padding::Valid, false);
        x = b.bn(&format!("{prefix}expand_BN"), x, 1e-3);
        x = b.relu6(&format!("{prefix}expand_relu"), x);
    }
    x = b.dw(&format!("{prefix}depthwise"), x, (stride, stride), Padding::Same);
    x = b.bn(&format!("{prefix}depthwise_BN"), x, 1e-3);
    x = b.relu6(&format!("{prefix}depthwise_relu"), x);
    x = b.conv(&format!("{prefix}project"), x, out_c, K1, S1, Padding::Valid, false);
    x = b.bn(&format!("{prefix}project_BN"), x, 1e-3);
    if in_c == out_c && stride == 1 {
        x = b.g.add(&format!("{prefix}add"), &[input, x]);
    }
    x
}

fn resnet50<T: Scalar>(b: &mut Builder<'_, T>) -> NodeId {
    let eps = 1.001e-5;
    let mut x = b.conv("conv1_conv", Graph::<T>::INPUT, 64, (7, 7), S2, Padding::Explicit(Pads::uniform(3)), true);
    x = b.bn("conv1_bn", x, eps);
    x = b.relu("conv1_relu", x);
    x = b.g.pool("pool1_pool", x, PoolKind::Max, K3, S2, Padding::Explicit(Pads::uniform(1)));

    let stacks: [(&str, usize, usize, usize); 4] =
        [("conv2", 64, 3, 1), ("conv3", 128, 4, 2), ("conv4", 256, 6, 2), ("conv5", 512, 3, 2)];
    for (stack, filters, blocks, stride) in stacks {
        for i in 1..=blocks {
            let name = format!("{stack}_block{i}");
            let s = if i == 1 { (stride, stride) } else { S1 };
            let shortcut = if i == 1 {
                let c = b.conv(&format!("{name}_0_conv"), x, 4 * filters, K1, s, Padding::Valid, true);
                b.bn(&format!("{name}_0_bn"), c, eps)
            } else {
                x
            };
            let mut y = b.conv(&format!("{name}_1_conv"), x, filters, K1, s, Padding::Valid, true);
            y = b.bn(&format!("{name}_1_bn"), y, eps);
            y = b.relu(&format!("{name}_1_relu"), y);
            y = b.conv(&format!("{name}_2_conv"), y, filters, K3, S1, Padding::Same, true);
            y = b.bn(&format!("{name}_2_bn"), y, eps);
            y = b.relu(&format!("{name}_2_relu"), y);
            y = b.conv(&format!("{name}_3_conv"), y, 4 * filters, K1, S1, Padding::Valid, true);
            y = b.bn(&format!("{name}_3_bn"), y, eps);
            let sum = b.g.add(&format!("{name}_add"), &[shortcut, y]);
            x = b.relu(&format!("{name}_out"), sum);
        }
    }
    x
}

fn xception<T: Scalar>(b: &mut Builder<'_, T>) -> NodeId {
    let eps = 1e-3;
    let mut x = b.conv("block1_conv1", Graph::<T>::INPUT, 32, K3, S2, Padding::Valid, false);
    x = b.bn("block1_conv1_bn", x, eps);
    x = b.relu("block1_conv1_act", x);
    x = b.conv("block1_conv2", x, 64, K3, S1, Padding::Valid, false);
    x = b.bn("block1_conv2_bn", x, eps);
    x = b.relu("block1_conv2_act", x);

    // Entry flow: blocks 2-4 downsample with a strided 1x1 shortcut.
    for (block, filters, leading_act) in [(2, 128, false), (3, 256, true), (4, 728, true)] {
        let r = b.conv(&format!("block{block}_shortcut"), x, filters, K1, S2, Padding::Same, false);
        let residual = b.bn(&format!("block{block}_shortcut_bn"), r, eps);
        let mut y = x;
        if leading_act {
            y = b.relu(&format!("block{block}_sepconv1_act"), y);
        }
        y = b.separable(&format!("block{block}_sepconv1"), y, filters);
        y = b.bn(&format!("block{block}_sepconv1_bn"), y, eps);
        y = b.relu(&format!("block{block}_sepconv2_act"), y);
        y = b.separable(&format!("block{block}_sepconv2"), y, filters);
        y = b.bn(&format!("block{block}_sepconv2_bn"), y, eps);
        y = b.g.pool(&format!("block{block}_pool"), y, PoolKind::Max, K3, S2, Padding::Same);
        x = b.g.add(&format!("block{block}_add"), &[y, residual]);
    }

    // Middle flow.
    for block in 5..=12 {
        let residual = x;
        let mut y = x;
        for i in 1..=3 {
            y = b.relu(&format!("block{block}_sepconv{i}_act"), y);
            y = b.separable(&format!("block{block}_sepconv{i}"), y, 728);
            y = b.bn(&format!("block{block}_sepconv{i}_bn"), y, eps);
        }
        x = b.g.add(&format!("block{block}_add"), &[y, residual]);
    }

    // Exit flow.
    let r = b.conv("block13_shortcut", x, 1024, K1, S2, Padding::Same, false);
    let residual = b.bn("block13_shortcut_bn", r, eps);
    let mut y = b.relu("block13_sepconv1_act", x);
    y = b.separable("block13_sepconv1", y, 728);
    y = b.bn("block13_sepconv1_bn", y, eps);
    y = b.relu("block13_sepconv2_act", y);
    y = b.separable("block13_sepconv2", y, 1024);
    y = b.bn("block13_sepconv2_bn", y, eps);
    y = b.g.pool("block13_pool", y, PoolKind::Max, K3, S2, Padding::Same);
    x = b.g.add("block13_add", &[y, residual]);

    x = b.separable("block14_sepconv1", x, 1536);
    x = b.bn("block14_sepconv1_bn", x, eps);
    x = b.relu("block14_sepconv1_act", x);
    x = b.separable("block14_sepconv2", x, 2048);
    x = b.bn("block14_sepconv2_bn", x, eps);
    b.relu("block14_sepconv2_act", x)
}

fn inception_v3<T: Scalar>(b: &mut Builder<'_, T>) -> NodeId {
    use Padding::{Same, Valid};
    let mut x = b.conv_bn("stem1", Graph::<T>::INPUT, 32, K3, S2, Valid);
    x = b.conv_bn("stem2", x, 32, K3, S1, Valid);
    x = b.conv_bn("stem3", x, 64, K3, S1, Same);
    x = b.g.pool("stem_pool1", x, PoolKind::Max, K3, S2, Valid);
    x = b.conv_bn("stem4", x, 80, K1, S1, Valid);
    x = b.conv_bn("stem5", x, 192, K3, S1, Valid);
    x = b.g.pool("stem_pool2", x, PoolKind::Max, K3, S2, Valid);

    // mixed 0-2: 35 x 35
    for (i, pool_filters) in [(0, 32), (1, 64), (2, 64)] {
        let m = format!("mixed{i}");
        let b1 = b.conv_bn(&format!("{m}_1x1"), x, 64, K1, S1, Same);
        let b5 = b.conv_bn(&format!("{m}_5x5a"), x, 48, K1, S1, Same);
        let b5 = b.conv_bn(&format!("{m}_5x5b"), b5, 64, (5, 5), S1, Same);
        let d = b.conv_bn(&format!("{m}_dbl_a"), x, 64, K1, S1, Same);
        let d = b.conv_bn(&format!("{m}_dbl_b"), d, 96, K3, S1, Same);
        let d = b.conv_bn(&format!("{m}_dbl_c"), d, 96, K3, S1, Same);
        let p = b.g.pool(&format!("{m}_pool"), x, PoolKind::Avg, K3, S1, Same);
        let p = b.conv_bn(&format!("{m}_pool_proj"), p, pool_filters, K1, S1, Same);
        x = b.g.concat(&m, &[b1, b5, d, p]);
    }

    // mixed 3: 17 x 17
    {
        let b3 = b.conv_bn("mixed3_3x3", x, 384, K3, S2, Valid);
        let d = b.conv_bn("mixed3_dbl_a", x, 64, K1, S1, Same);
        let d = b.conv_bn("mixed3_dbl_b", d, 96, K3, S1, Same);
        let d = b.conv_bn("mixed3_dbl_c", d, 96, K3, S2, Valid);
        let p = b.g.pool("mixed3_pool", x, PoolKind::Max, K3, S2, Valid);
        x = b.g.concat("mixed3", &[b3, d, p]);
    }

    // mixed 4-7: 17 x 17 with factorized 7x7
    for (i, width) in [(4, 128), (5, 160), (6, 160), (7, 192)] {
        let m = format!("mixed{i}");
        let b1 = b.conv_bn(&format!("{m}_1x1"), x, 192, K1, S1, Same);
        let s = b.conv_bn(&format!("{m}_7x7a"), x, width, K1, S1, Same);
        let s = b.conv_bn(&format!("{m}_7x7b"), s, width, (1, 7), S1, Same);
        let s = b.conv_bn(&format!("{m}_7x7c"), s, 192, (7, 1), S1, Same);
        let d = b.conv_bn(&format!("{m}_dbl_a"), x, width, K1, S1, Same);
        let d = b.conv_bn(&format!("{m}_dbl_b"), d, width, (7, 1), S1, Same);
        let d = b.conv_bn(&format!("{m}_dbl_c"), d, width, (1, 7), S1, Same);
        let d = b.conv_bn(&format!("{m}_dbl_d"), d, width, (7, 1), S1, Same);
        let d = b.conv_bn(&format!("{m}_dbl_e"), d, 192, (1, 7), S1, Same);
        let p = b.g.pool(&format!("{m}_pool"), x, PoolKind::Avg, K3, S1, Same);
        let p = b.conv_bn(&format!("{m}_pool_proj"), p, 192, K1, S1, Same);
        x = b.g.concat(&m, &[b1, s, d, p]);
    }

    // mixed 8: 8 x 8
    {
        let b3 = b.conv_bn("mixed8_3x3a", x, 192, K1, S1, Same);
        let b3 = b.conv_bn("mixed8_3x3b", b3, 320, K3, S2, Valid);
        let s = b.conv_bn("mixed8_7x7x3a", x, 192, K1, S1, Same);
        let s = b.conv_bn("mixed8_7x7x3b", s, 192, (1, 7), S1, Same);
        let s = b.conv_bn("mixed8_7x7x3c", s, 192, (7, 1), S1, Same);
        let s = b.conv_bn("mixed8_7x7x3d", s, 192, K3, S2, Valid);
        let p = b.g.pool("mixed8_pool", x, PoolKind::Max, K3, S2, Valid);
        x = b.g.concat("mixed8", &[b3, s, p]);
    }

    // mixed 9-10: 8 x 8 with expanded filter banks
    for i in [9, 10] {
        let m = format!("mixed{i}");
        let b1 = b.conv_bn(&format!("{m}_1x1"), x, 320, K1, S1, Same);
        let t = b.conv_bn(&format!("{m}_3x3"), x, 384, K1, S1, Same);
        let t1 = b.conv_bn(&format!("{m}_3x3_1x3"), t, 384, (1, 3), S1, Same);
        let t2 = b.conv_bn(&format!("{m}_3x3_3x1"), t, 384, (3, 1), S1, Same);
        let t = b.g.concat(&format!("{m}_3x3_cat"), &[t1, t2]);
        let d = b.conv_bn(&format!("{m}_dbl_a"), x, 448, K1, S1, Same);
        let d = b.conv_bn(&format!("{m}_dbl_b"), d, 384, K3, S1, Same);
        let d1 = b.conv_bn(&format!("{m}_dbl_1x3"), d, 384, (1, 3), S1, Same);
        let d2 = b.conv_bn(&format!("{m}_dbl_3x1"), d, 384, (3, 1), S1, Same);
        let d = b.g.concat(&format!("{m}_dbl_cat"), &[d1, d2]);
        let p = b.g.pool(&format!("{m}_pool"), x, PoolKind::Avg, K3, S1, Same);
        let p = b.conv_bn(&format!("{m}_pool_proj"), p, 192, K1, S1, Same);
        x = b.g.concat(&m, &[b1, t, d, p]);
    }
    x
}

fn inception_resnet_v2<T: Scalar>(b: &mut Builder<'_, T>) -> NodeId {
    use Padding::{Same, Valid};
    let mut x = b.conv_bn("stem1", Graph::<T>::INPUT, 32, K3, S2, Valid);
    x = b.conv_bn("stem2", x, 32, K3, S1, Valid);
    x = b.conv_bn("stem3", x, 64, K3, S1, Same);
    x = b.g.pool("stem_pool1", x, PoolKind::Max, K3, S2, Valid);
    x = b.conv_bn("stem4", x, 80, K1, S1, Valid);
    x = b.conv_bn("stem5", x, 192, K3, S1, Valid);
    x = b.g.pool("stem_pool2", x, PoolKind::Max, K3, S2, Valid);

    {
        let b0 = b.conv_bn("mixed_5b_b0", x, 96, K1, S1, Same);
        let b1 = b.conv_bn("mixed_5b_b1a", x, 48, K1, S1, Same);
        let b1 = b.conv_bn("mixed_5b_b1b", b1, 64, (5, 5), S1, Same);
        let b2 = b.conv_bn("mixed_5b_b2a", x, 64, K1, S1, Same);
        let b2 = b.conv_bn("mixed_5b_b2b", b2, 96, K3, S1, Same);
        let b2 = b.conv_bn("mixed_5b_b2c", b2, 96, K3, S1, Same);
        let p = b.g.pool("mixed_5b_pool", x, PoolKind::Avg, K3, S1, Same);
        let p = b.conv_bn("mixed_5b_b3", p, 64, K1, S1, Same);
        x = b.g.concat("mixed_5b", &[b0, b1, b2, p]);
    }

    for i in 1..=10 {
        let n = format!("block35_{i}");
        let b0 = b.conv_bn(&format!("{n}_b0"), x, 32, K1, S1, Same);
        let b1 = b.conv_bn(&format!("{n}_b1a"), x, 32, K1, S1, Same);
        let b1 = b.conv_bn(&format!("{n}_b1b"), b1, 32, K3, S1, Same);
        let b2 = b.conv_bn(&format!("{n}_b2a"), x, 32, K1, S1, Same);
        let b2 = b.conv_bn(&format!("{n}_b2b"), b2, 48, K3, S1, Same);
        let b2 = b.conv_bn(&format!("{n}_b2c"), b2, 64, K3, S1, Same);
        let mixed = b.g.concat(&format!("{n}_mixed"), &[b0, b1, b2]);
        x = residual_scale(b, &n, x, mixed, 0.17, true);
    }

    {
        let b0 = b.conv_bn("mixed_6a_b0", x, 384, K3, S2, Valid);
        let b1 = b.conv_bn("mixed_6a_b1a", x, 256, K1, S1, Same);
        let b1 = b.conv_bn("mixed_6a_b1b", b1, 256, K3, S1, Same);
        let b1 = b.conv_bn("mixed_6a_b1c", b1, 384, K3, S2, Valid);
        let p = b.g.pool("mixed_6a_pool", x, PoolKind::Max, K3, S2, Valid);
        x = b.g.concat("mixed_6a", &[b0, b1, p]);
    }

    for i in 1..=20 {
        let n = format!("block17_{i}");
        let b0 = b.conv_bn(&format!("{n}_b0"), x, 192, K1, S1, Same);
        let b1 = b.conv_bn(&format!("{n}_b1a"), x, 128, K1, S1, Same);
        let b1 = b.conv_bn(&format!("{n}_b1b"), b1, 160, (1, 7), S1, Same);
        let b1 = b.conv_bn(&format!("{n}_b1c"), b1, 192, (7, 1), S1, Same);
        let mixed = b.g.concat(&format!("{n}_mixed"), &[b0, b1]);
        x = residual_scale(b, &n, x, mixed, 0.1, true);
    }

    {
        let b0 = b.conv_bn("mixed_7a_b0a", x, 256, K1, S1, Same);
        let b0 = b.conv_bn("mixed_7a_b0b", b0, 384, K3, S2, Valid);
        let b1 = b.conv_bn("mixed_7a_b1a", x, 256, K1, S1, Same);
        let b1 = b.conv_bn("mixed_7a_b1b", b1, 288, K3, S2, Valid);
        let b2 = b.conv_bn("mixed_7a_b2a", x, 256, K1, S1, Same);
        let b2 = b.conv_bn("mixed_7a_b2b", b2, 288, K3, S1, Same);
        let b2 = b.conv_bn("mixed_7a_b2c", b2, 320, K3, S2, Valid);
        let p = b.g.pool("mixed_7a_pool", x, PoolKind::Max, K3, S2, Valid);
        x = b.g.concat("mixed_7a", &[b0, b1, b2, p]);
    }

    for i in 1..=10 {
        let n = format!("block8_{i}");
        let last = i == 10;
        let b0 = b.conv_bn(&format!("{n}_b0"), x, 192, K1, S1, Same);
        let b1 = b.conv_bn(&format!("{n}_b1a"), x, 192, K1, S1, Same);
        let b1 = b.conv_bn(&format!("{n}_b1b"), b1, 224, (1, 3), S1, Same);
        let b1 = b.conv_bn(&format!("{n}_b1c"), b1, 256, (3, 1), S1, Same);
        let mixed = b.g.concat(&format!("{n}_mixed"), &[b0, b1]);
        x = residual_scale(b, &n, x, mixed, if last { 1.0 } else { 0.2 }, !last);
    }

    b.conv_bn("conv_7b", x, 1536, K1, S1, Same)
}

/// `x + scale * up(mixed)`, optionally followed by ReLU.
fn residual_scale<T: Scalar>(b: &mut Builder<'_, T>, name: &str, x: NodeId, mixed: NodeId, scale: f64, act: bool) -> NodeId {
    let channels = b.g.shape(x).c;
    let up = b.conv(&format!("{name}_conv"), mixed, channels, K1, S1, Padding::Same, true);
    let scaled = b.g.scale(&format!("{name}_scale"), up, scale);
    let sum = b.g.add(&format!("{name}_add"), &[x, scaled]);
    if act {
        b.relu(&format!("{name}_ac"), sum)
    } else {
        sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn registry_is_complete_and_unique() {
        let mut ids: Vec<_> = ids().collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 6);
        for e in &REGISTRY {
            assert!(e.input_size.0 > 0 && e.input_size.1 > 0 && e.feature_dim > 0);
            assert_eq!(lookup(e.id), Some(e));
        }
        assert!(lookup("vgg16").is_none());
    }

    #[test]
    fn normalization_extremes() {
        assert_eq!(Normalization::SymmetricUnit.apply([0, 0, 0]), [-1.0; 3]);
        assert_eq!(Normalization::SymmetricUnit.apply([255, 255, 255]), [1.0; 3]);
        let (lo, hi) = Normalization::CaffeBgr.value_range();
        for px in [[0u8, 0, 0], [255, 255, 255], [0, 255, 0]] {
            for v in Normalization::CaffeBgr.apply(px) {
                assert!(v >= lo && v <= hi);
            }
        }
    }

    #[test]
    fn make_divisible_matches_reference_values() {
        assert_eq!(make_divisible(16.0, 8), 16);
        assert_eq!(make_divisible(32.0 * 0.35, 8), 16);
        assert_eq!(make_divisible(1280.0 * 1.0, 8), 1280);
    }

    #[test]
    fn feature_maps_match_registry() {
        // Build every backbone and check the channel count of its last
        // feature map against the declared pooled-feature width.
        for e in &REGISTRY {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (g, out) = build::<f32>(e, &mut rng);
            let s = g.shape(out);
            assert_eq!(s.c, e.feature_dim, "{}", e.id);
            let expected_hw = match e.input_size.0 {
                224 => 7,
                299 => match e.architecture {
                    Architecture::Xception => 10,
                    _ => 8,
                },
                _ => unreachable!(),
            };
            assert_eq!((s.h, s.w), (expected_hw, expected_hw), "{}", e.id);
        }
    }

    #[test]
    fn parameter_counts_match_published_sizes() {
        // Keras application sizes without the ImageNet classifier, counting
        // batch-norm statistics (`include_top=False`).
        let published = [
            ("mobilenet", 3_228_864usize),
            ("mobilenet_v2", 2_257_984),
            ("resnet50", 23_587_712),
            ("xception", 20_861_480),
            ("inception_v3", 21_802_784),
            ("inception_resnet_v2", 54_336_736),
        ];
        for (id, count) in published {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (g, _) = build::<f32>(lookup(id).unwrap(), &mut rng);
            let mut n = g.param_count();
            if matches!(id, "inception_v3" | "inception_resnet_v2") {
                // Keras omits the BN scale in conv2d_bn; ours stores it, fixed at one.
                let gammas: usize = g
                    .nodes()
                    .iter()
                    .filter(|node| matches!(&node.op, crate::nn::Op::BatchNorm(b) if b.fixed_gamma))
                    .map(|node| node.shape.c)
                    .sum();
                n -= gammas;
            }
            assert_eq!(n, count, "{id}");
        }
    }
}
