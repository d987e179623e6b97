//! Model builders: the U-shaped sinogram decomposition network and the
//! residual image refinement network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dect_core::error::{Error, Result};

use crate::model::{Model, Node, Op};
use crate::tensor::{randn, Tensor};

/// U-shaped encoder-decoder over the dilated dual-energy input. Each encoder
/// level applies two 3x3 conv+relu, then 2x2 max pooling; channel counts
/// double per level from `base_channels` up to `channel_cap`. One bottleneck
/// block sits between encoder and decoder; each decoder level upsamples
/// (nearest), halves channels with a conv, concatenates the matching encoder
/// feature map and fuses it with another conv. A final 1x1 conv maps to the
/// three material channels.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SinoNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    pub kernel: usize,
    pub pool: usize,
}

impl SinoNetConfig {
    /// Desk-scale default: depth 3, base 8.
    pub fn desk() -> Self {
        SinoNetConfig {
            in_channels: 2,
            out_channels: 3,
            depth: 3,
            base_channels: 8,
            channel_cap: 320,
            kernel: 3,
            pool: 2,
        }
    }

    /// Full-scale configuration: depth 7, base 32, cap 320.
    pub fn full() -> Self {
        SinoNetConfig {
            depth: 7,
            base_channels: 32,
            ..SinoNetConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config("depth and base_channels must be >= 1".into()));
        }
        if self.kernel != 3 || self.pool != 2 {
            return Err(Error::Config("sinonet uses 3x3 kernels and 2x2 pooling".into()));
        }
        if self.channel_cap < self.base_channels {
            return Err(Error::Config("channel_cap below base_channels".into()));
        }
        Ok(())
    }

    /// Doubling-with-cap schedule: channels of each encoder level.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| (self.base_channels << i).min(self.channel_cap))
            .collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        (self.base_channels << self.depth).min(self.channel_cap)
    }

    /// Input spatial sizes must be divisible by pool^depth.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let divisor = self.pool.pow(self.depth as u32);
        if h % divisor != 0 || w % divisor != 0 {
            return Err(Error::Dim(format!(
                "input {h}x{w} not divisible by pool^depth = {divisor}"
            )));
        }
        Ok(())
    }
}

/// Plain convolutional refiner: a stem conv, `n_blocks` residual blocks
/// (conv-relu-conv plus skip, 1x1 projection when the channel count
/// changes, relu after the sum) and a head conv to three channels. No
/// pooling anywhere, so spatial resolution is preserved end to end.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DenoiseNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub n_blocks: usize,
    pub kernel: usize,
    pub stride: usize,
    pub channel_schedule: Vec<usize>,
}

impl DenoiseNetConfig {
    /// Desk-scale default: 4 blocks, channels rising then falling.
    pub fn desk() -> Self {
        DenoiseNetConfig {
            in_channels: 3,
            out_channels: 3,
            n_blocks: 4,
            kernel: 3,
            stride: 1,
            channel_schedule: vec![32, 64, 64, 32],
        }
    }

    /// Full-scale configuration: 16 blocks doubling every two blocks up to
    /// 256 and mirroring back down.
    pub fn full() -> Self {
        DenoiseNetConfig {
            n_blocks: 16,
            channel_schedule: vec![
                32, 32, 64, 64, 128, 128, 256, 256, 256, 256, 128, 128, 64, 64, 32, 32,
            ],
            ..DenoiseNetConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_schedule.len() != self.n_blocks {
            return Err(Error::Config(format!(
                "channel schedule has {} entries for {} blocks",
                self.channel_schedule.len(),
                self.n_blocks
            )));
        }
        if self.n_blocks == 0 || self.channel_schedule.iter().any(|&c| c == 0) {
            return Err(Error::Config("blocks and channels must be nonzero".into()));
        }
        if self.kernel != 3 || self.stride != 1 {
            return Err(Error::Config("denoisenet uses 3x3 kernels with stride 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum ModelKind {
    SinoNet(SinoNetConfig),
    DenoiseNet(DenoiseNetConfig),
}

impl ModelKind {
    pub fn build(&self, seed: u64) -> Result<Model> {
        match self {
            ModelKind::SinoNet(cfg) => build_sinonet(cfg, seed),
            ModelKind::DenoiseNet(cfg) => build_denoisenet(cfg, seed),
        }
    }
}

/// Incremental graph assembly with He-initialized convolutions.
struct Builder {
    nodes: Vec<Node>,
    params: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Builder {
            nodes: vec![Node {
                op: Op::Input,
                inputs: vec![],
            }],
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn conv(&mut self, from: usize, c_in: usize, c_out: usize, k: usize) -> usize {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w: Vec<f64> = (0..c_out * c_in * k * k)
            .map(|_| randn(&mut self.rng) * std)
            .collect();
        let weight = self.push_param(Tensor::param([c_out, c_in, k, k], w));
        let bias = self.push_param(Tensor::param([1, 1, 1, c_out], vec![0.0; c_out]));
        self.push_node(Op::Conv { weight, bias }, vec![from])
    }

    fn push_param(&mut self, t: Tensor) -> usize {
        self.params.push(t);
        self.params.len() - 1
    }

    fn push_node(&mut self, op: Op, inputs: Vec<usize>) -> usize {
        self.nodes.push(Node { op, inputs });
        self.nodes.len() - 1
    }

    fn relu(&mut self, from: usize) -> usize {
        self.push_node(Op::Relu, vec![from])
    }

    fn conv_relu(&mut self, from: usize, c_in: usize, c_out: usize, k: usize) -> usize {
        let c = self.conv(from, c_in, c_out, k);
        self.relu(c)
    }

    fn finish(self) -> Model {
        Model {
            nodes: self.nodes,
            params: self.params,
        }
    }
}

pub fn build_sinonet(cfg: &SinoNetConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let enc = cfg.encoder_channels();
    let mut b = Builder::new(seed);
    let mut cur = 0usize;
    let mut cur_c = cfg.in_channels;
    let mut skips: Vec<(usize, usize)> = Vec::new(); // (node, channels)

    for &c in &enc {
        cur = b.conv_relu(cur, cur_c, c, cfg.kernel);
        cur = b.conv_relu(cur, c, c, cfg.kernel);
        skips.push((cur, c));
        cur = b.push_node(Op::MaxPool2, vec![cur]);
        cur_c = c;
    }

    let cb = cfg.bottleneck_channels();
    cur = b.conv_relu(cur, cur_c, cb, cfg.kernel);
    cur = b.conv_relu(cur, cb, cb, cfg.kernel);
    cur_c = cb;

    for &(skip_node, skip_c) in skips.iter().rev() {
        cur = b.push_node(Op::Upsample2, vec![cur]);
        cur = b.conv_relu(cur, cur_c, skip_c, cfg.kernel);
        cur = b.push_node(Op::Concat, vec![cur, skip_node]);
        cur = b.conv_relu(cur, 2 * skip_c, skip_c, cfg.kernel);
        cur_c = skip_c;
    }

    b.conv(cur, cur_c, cfg.out_channels, 1);
    Ok(b.finish())
}

pub fn build_denoisenet(cfg: &DenoiseNetConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut b = Builder::new(seed);
    let mut cur = b.conv_relu(0, cfg.in_channels, cfg.channel_schedule[0], cfg.kernel);
    let mut cur_c = cfg.channel_schedule[0];

    for &c in &cfg.channel_schedule {
        let block_in = cur;
        let mut body = b.conv_relu(block_in, cur_c, c, cfg.kernel);
        body = b.conv(body, c, c, cfg.kernel);
        let skip = if cur_c == c {
            block_in
        } else {
            b.conv(block_in, cur_c, c, 1)
        };
        let sum = b.push_node(Op::Add, vec![body, skip]);
        cur = b.relu(sum);
        cur_c = c;
    }

    b.conv(cur, cur_c, cfg.out_channels, cfg.kernel);
    Ok(b.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_schedules_follow_doubling_with_cap() {
        assert_eq!(SinoNetConfig::desk().encoder_channels(), vec![8, 16, 32]);
        assert_eq!(
            SinoNetConfig::full().encoder_channels(),
            vec![32, 64, 128, 256, 320, 320, 320]
        );
        assert_eq!(SinoNetConfig::full().bottleneck_channels(), 320);
    }

    #[test]
    fn sinonet_preserves_spatial_shape() {
        let cfg = SinoNetConfig::desk();
        let model = build_sinonet(&cfg, 1).unwrap();
        let x = Tensor::zeros([1, 2, 64, 128]);
        let (y, _) = model.forward(&x);
        assert_eq!(y.shape, [1, 3, 64, 128]);
    }

    #[test]
    fn sinonet_rejects_indivisible_input() {
        let cfg = SinoNetConfig::desk();
        assert!(cfg.check_input(64, 128).is_ok());
        assert!(cfg.check_input(60, 128).is_err());
    }

    #[test]
    fn sinonet_parameter_count_matches_closed_form() {
        let cfg = SinoNetConfig::desk();
        let model = build_sinonet(&cfg, 0).unwrap();
        // Closed form: sum over convs of cout*cin*k*k + cout.
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let enc = cfg.encoder_channels();
        let mut expected = 0;
        let mut c_in = cfg.in_channels;
        for &c in &enc {
            expected += conv(c_in, c, 3) + conv(c, c, 3);
            c_in = c;
        }
        let cb = cfg.bottleneck_channels();
        expected += conv(c_in, cb, 3) + conv(cb, cb, 3);
        let mut cur = cb;
        for &c in enc.iter().rev() {
            expected += conv(cur, c, 3) + conv(2 * c, c, 3);
            cur = c;
        }
        expected += conv(cur, cfg.out_channels, 1);
        assert_eq!(model.param_count(), expected);
    }

    #[test]
    fn denoisenet_preserves_resolution_and_has_no_pooling() {
        let cfg = DenoiseNetConfig::desk();
        let model = build_denoisenet(&cfg, 3).unwrap();
        assert!(!model.has_pooling());
        let x = Tensor::zeros([1, 3, 24, 40]);
        let (y, _) = model.forward(&x);
        assert_eq!(y.shape, [1, 3, 24, 40]);
    }

    #[test]
    fn denoisenet_schedule_length_enforced() {
        let mut cfg = DenoiseNetConfig::desk();
        cfg.channel_schedule.pop();
        assert!(build_denoisenet(&cfg, 0).is_err());
    }

    #[test]
    fn full_scale_builders_assemble() {
        // Paper-scale graphs build and hold the advertised structure; no
        // forward pass here (too large for a unit test).
        let sino = build_sinonet(&SinoNetConfig::full(), 0).unwrap();
        assert!(sino.param_count() > 1_000_000);
        let den = build_denoisenet(&DenoiseNetConfig::full(), 0).unwrap();
        assert!(!den.has_pooling());
        assert_eq!(den.nodes.iter().filter(|n| n.op == Op::Add).count(), 16);
    }

    #[test]
    fn same_seed_builds_identical_weights() {
        let a = build_sinonet(&SinoNetConfig::desk(), 7).unwrap();
        let b = build_sinonet(&SinoNetConfig::desk(), 7).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.data, pb.data);
        }
    }
}
