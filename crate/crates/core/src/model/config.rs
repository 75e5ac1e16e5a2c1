use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Aggregator that turns a candidate group into a `d_v·L` vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregator {
    Sal,
    /// Relation-network ablation with the given hidden width.
    Rn { hidden: usize },
}

/// Named layer-width presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    ScarPaper,
    ScarTiny,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::ScarPaper => "scar-paper",
            Preset::ScarTiny => "scar-tiny",
        }
    }

    pub fn config(self) -> ScarConfig {
        match self {
            Preset::ScarPaper => ScarConfig::scar_paper(),
            Preset::ScarTiny => ScarConfig::scar_tiny(),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scar-paper" => Ok(Preset::ScarPaper),
            "scar-tiny" => Ok(Preset::ScarTiny),
            other => Err(Error::invalid(format!("unknown preset `{other}`"))),
        }
    }
}

/// Layer widths of the SCAR network.
#[derive(Clone, Debug, PartialEq)]
pub struct ScarConfig {
    pub panel_h: usize,
    pub panel_w: usize,
    /// Output channels of the four 3×3 convolutions; the first has stride 2.
    pub conv_channels: [usize; 4],
    /// Per-channel spatial linear output width.
    pub d_e: usize,
    pub encoder_mixer_hidden: usize,
    /// Encoder channel mixer: hidden channels, kernel (= stride), output channels.
    pub encoder_channel_hidden: usize,
    pub encoder_channel_kernel: usize,
    pub encoder_channel_out: usize,
    pub big_r: usize,
    pub big_c: usize,
    pub d_h: usize,
    pub heads: usize,
    pub d_v: usize,
    pub sal_bias: bool,
    pub reasoner_channel_hidden: usize,
    pub reasoner_channel_out: usize,
    pub reasoner_mixer_hidden: usize,
    pub d_g: usize,
    pub aggregator: Aggregator,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
}

impl ScarConfig {
    pub fn scar_paper() -> Self {
        Self {
            panel_h: 80,
            panel_w: 80,
            conv_channels: [16, 16, 32, 32],
            d_e: 80,
            encoder_mixer_hidden: 320,
            encoder_channel_hidden: 128,
            encoder_channel_kernel: 8,
            encoder_channel_out: 8,
            big_r: 6,
            big_c: 60,
            d_h: 80,
            heads: 20,
            d_v: 64,
            sal_bias: true,
            reasoner_channel_hidden: 32,
            reasoner_channel_out: 5,
            reasoner_mixer_hidden: 400,
            d_g: 128,
            aggregator: Aggregator::Sal,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ln_eps: 1e-5,
        }
    }

    pub fn scar_tiny() -> Self {
        Self {
            panel_h: 32,
            panel_w: 32,
            conv_channels: [8, 8, 16, 16],
            d_e: 20,
            encoder_mixer_hidden: 80,
            encoder_channel_hidden: 32,
            encoder_channel_kernel: 4,
            encoder_channel_out: 4,
            big_r: 6,
            big_c: 60,
            d_h: 20,
            heads: 5,
            d_v: 16,
            sal_bias: true,
            reasoner_channel_hidden: 8,
            reasoner_channel_out: 4,
            reasoner_mixer_hidden: 80,
            d_g: 128,
            aggregator: Aggregator::Sal,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ln_eps: 1e-5,
        }
    }

    /// Spatial extent after the stride-2 first convolution.
    pub fn conv_hw(&self) -> (usize, usize) {
        (self.panel_h.div_ceil(2), self.panel_w.div_ceil(2))
    }

    /// Width of the flattened reasoner feature, `reasoner_channel_out · L`.
    pub fn reasoner_width(&self) -> usize {
        self.reasoner_channel_out * self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.panel_h,
            self.panel_w,
            self.d_e,
            self.encoder_mixer_hidden,
            self.encoder_channel_hidden,
            self.encoder_channel_kernel,
            self.encoder_channel_out,
            self.big_r,
            self.big_c,
            self.d_h,
            self.heads,
            self.d_v,
            self.reasoner_channel_hidden,
            self.reasoner_channel_out,
            self.reasoner_mixer_hidden,
            self.d_g,
        ];
        if positive.contains(&0) || self.conv_channels.contains(&0) {
            return Err(Error::invalid("all layer widths must be positive"));
        }
        if !self.d_e.is_multiple_of(self.encoder_channel_kernel) {
            return Err(Error::invalid(format!(
                "channel-mixer kernel {} does not divide d_e = {}",
                self.encoder_channel_kernel, self.d_e
            )));
        }
        let flat = self.encoder_channel_out * (self.d_e / self.encoder_channel_kernel);
        if flat != self.d_h {
            return Err(Error::invalid(format!(
                "encoder channel mixer yields width {flat}, but d_h = {}",
                self.d_h
            )));
        }
        if !self.d_h.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!("{} heads do not divide d_h = {}", self.heads, self.d_h)));
        }
        if let Aggregator::Rn { hidden: 0 } = self.aggregator {
            return Err(Error::invalid("relation-network hidden width must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 || self.ln_eps <= 0.0 {
            return Err(Error::invalid("normalisation constants out of range"));
        }
        Ok(())
    }

    /// Flat numeric encoding stored alongside checkpoints.
    pub fn to_vec(&self) -> Vec<f64> {
        let (agg, rn_hidden) = match self.aggregator {
            Aggregator::Sal => (0.0, 0.0),
            Aggregator::Rn { hidden } => (1.0, hidden as f64),
        };
        let mut v = vec![self.panel_h as f64, self.panel_w as f64];
        v.extend(self.conv_channels.iter().map(|&c| c as f64));
        v.extend(
            [
                self.d_e,
                self.encoder_mixer_hidden,
                self.encoder_channel_hidden,
                self.encoder_channel_kernel,
                self.encoder_channel_out,
                self.big_r,
                self.big_c,
                self.d_h,
                self.heads,
                self.d_v,
                self.sal_bias as usize,
                self.reasoner_channel_hidden,
                self.reasoner_channel_out,
                self.reasoner_mixer_hidden,
                self.d_g,
            ]
            .iter()
            .map(|&x| x as f64),
        );
        v.extend([agg, rn_hidden, self.bn_momentum, self.bn_eps, self.ln_eps]);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        const LEN: usize = 26;
        if v.len() != LEN {
            return Err(Error::invalid(format!("config record has {} values, expected {LEN}", v.len())));
        }
        let u = |i: usize| -> Result<usize> {
            let x = v[i];
            if x < 0.0 || x.fract() != 0.0 || !x.is_finite() {
                return Err(Error::invalid(format!("config field {i} is not a count: {x}")));
            }
            Ok(x as usize)
        };
        let aggregator = match u(21)? {
            0 => Aggregator::Sal,
            1 => Aggregator::Rn { hidden: u(22)? },
            other => return Err(Error::invalid(format!("unknown aggregator code {other}"))),
        };
        let cfg = Self {
            panel_h: u(0)?,
            panel_w: u(1)?,
            conv_channels: [u(2)?, u(3)?, u(4)?, u(5)?],
            d_e: u(6)?,
            encoder_mixer_hidden: u(7)?,
            encoder_channel_hidden: u(8)?,
            encoder_channel_kernel: u(9)?,
            encoder_channel_out: u(10)?,
            big_r: u(11)?,
            big_c: u(12)?,
            d_h: u(13)?,
            heads: u(14)?,
            d_v: u(15)?,
            sal_bias: u(16)? != 0,
            reasoner_channel_hidden: u(17)?,
            reasoner_channel_out: u(18)?,
            reasoner_mixer_hidden: u(19)?,
            d_g: u(20)?,
            aggregator,
            bn_momentum: v[23],
            bn_eps: v[24],
            ln_eps: v[25],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in [Preset::ScarPaper, Preset::ScarTiny] {
            let c = p.config();
            c.validate().unwrap();
            assert_eq!(ScarConfig::from_slice(&c.to_vec()).unwrap(), c);
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        let mut rn = ScarConfig::scar_tiny();
        rn.aggregator = Aggregator::Rn { hidden: 32 };
        assert_eq!(ScarConfig::from_slice(&rn.to_vec()).unwrap(), rn);
    }

    #[test]
    fn full_preset_arithmetic() {
        let c = ScarConfig::scar_paper();
        assert_eq!(c.conv_hw(), (40, 40));
        assert_eq!(c.reasoner_width(), 100);
        assert_eq!(c.heads * c.d_v, 1280);
        assert_eq!((c.d_g, ScarConfig::scar_tiny().d_g), (128, 128));
    }

    #[test]
    fn inconsistent_widths_rejected() {
        let mut c = ScarConfig::scar_tiny();
        c.d_h = 24;
        assert!(c.validate().is_err());
        let mut c = ScarConfig::scar_tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
    }
}
