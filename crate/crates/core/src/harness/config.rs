use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{disc_widths, AdaptFlags, Lambdas};
use crate::error::{Error, Result};
use crate::segnet::{SegNetConfig, NUM_SCALES};
use crate::synth::{AugmentConfig, SynthConfig};

/// Everything that determines a training run. Serialised as flat TOML; every
/// field has a default, so a config file only lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Square image extent, a multiple of 32.
    pub image_size: usize,
    /// Segmentation network channels at full resolution.
    pub base_channels: usize,
    /// First hidden width of every discriminator; later layers double it.
    pub disc_base_channels: usize,

    pub lambda_seg: f64,
    pub lambda_adv_enc: f64,
    pub lambda_adv_dec: f64,
    pub lambda_mse_enc: f64,
    pub lambda_mse_dec: f64,

    pub enc_enabled: bool,
    pub se_enabled: bool,
    pub num_dec_discs: usize,
    /// Feed unlabeled target images at all. Off for source-only training.
    pub use_target: bool,

    pub ema_alpha: f64,
    pub seg_lr: f64,
    pub seg_momentum: f64,
    pub disc_lr: f64,
    pub poly_power: f64,

    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Run seeds used by `ablate`.
    pub ablation_seeds: Vec<u64>,
    pub checkpoint_every: usize,

    pub augment_noise_max: f64,
    pub augment_gain_min: f64,
    pub augment_gain_max: f64,
    pub augment_offset_min: f64,
    pub augment_offset_max: f64,

    /// Dataset directory written by `synth`. Without it the dataset is
    /// generated in memory from the fields below.
    pub data_dir: Option<PathBuf>,
    pub data_seed: u64,
    pub shift: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub n_test: usize,

    /// Checkpoint whose student weights initialise the run.
    pub init_from: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let l = Lambdas::default();
        let f = AdaptFlags::default();
        let a = AugmentConfig::default();
        let s = SynthConfig::default();
        RunConfig {
            image_size: 64,
            base_channels: 8,
            disc_base_channels: 16,
            lambda_seg: l.seg,
            lambda_adv_enc: l.adv_enc,
            lambda_adv_dec: l.adv_dec,
            lambda_mse_enc: l.mse_enc,
            lambda_mse_dec: l.mse_dec,
            enc_enabled: f.enc_enabled,
            se_enabled: f.se_enabled,
            num_dec_discs: f.num_dec_discs,
            use_target: true,
            ema_alpha: 0.99,
            seg_lr: 1e-2,
            seg_momentum: 0.9,
            disc_lr: 2.5e-4,
            poly_power: 0.9,
            batch_size: 4,
            epochs: 30,
            seed: 0,
            ablation_seeds: vec![0, 1, 2],
            checkpoint_every: 5,
            augment_noise_max: a.noise_sigma_max,
            augment_gain_min: a.gain.0,
            augment_gain_max: a.gain.1,
            augment_offset_min: a.offset.0,
            augment_offset_max: a.offset.1,
            data_dir: None,
            data_seed: s.seed,
            shift: s.shift,
            n_source: s.n_source,
            n_target: s.n_target,
            n_test: s.n_test,
            init_from: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.segnet().validate()?;
        self.lambdas().validate()?;
        self.flags().validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("checkpoint_every", self.checkpoint_every),
            ("disc_base_channels", self.disc_base_channels),
            ("n_source", self.n_source),
            ("n_test", self.n_test),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.use_target && self.n_target == 0 {
            return Err(Error::Config("n_target must be positive when use_target is set".into()));
        }
        if !self.use_target && !self.flags().supervised_only() {
            return Err(Error::Config(
                "adaptation flags need target data: set use_target or disable every adaptor".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::Config(format!("ema_alpha {} outside [0,1]", self.ema_alpha)));
        }
        for (name, v) in [("seg_lr", self.seg_lr), ("disc_lr", self.disc_lr), ("poly_power", self.poly_power)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.seg_momentum) {
            return Err(Error::Config("seg_momentum must be in [0,1)".into()));
        }
        if self.batch_size > self.n_source {
            return Err(Error::Config("batch_size exceeds n_source".into()));
        }
        let a = self.augment();
        if a.noise_sigma_max < 0.0 || a.gain.0 > a.gain.1 || a.offset.0 > a.offset.1 {
            return Err(Error::Config("augmentation ranges must be ordered and non-negative".into()));
        }
        if self.shift < 0.0 {
            return Err(Error::Config("shift must be non-negative".into()));
        }
        self.synth().target_spec().validate()
    }

    pub fn segnet(&self) -> SegNetConfig {
        SegNetConfig {
            base_channels: self.base_channels,
            input_size: self.image_size,
            ..SegNetConfig::default()
        }
    }

    pub fn lambdas(&self) -> Lambdas {
        Lambdas {
            seg: self.lambda_seg,
            adv_enc: self.lambda_adv_enc,
            adv_dec: self.lambda_adv_dec,
            mse_enc: self.lambda_mse_enc,
            mse_dec: self.lambda_mse_dec,
        }
    }

    pub fn flags(&self) -> AdaptFlags {
        AdaptFlags {
            enc_enabled: self.enc_enabled,
            se_enabled: self.se_enabled,
            num_dec_discs: self.num_dec_discs,
        }
    }

    pub fn disc_widths(&self) -> [usize; 4] {
        disc_widths(self.disc_base_channels)
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            noise_sigma_max: self.augment_noise_max,
            gain: (self.augment_gain_min, self.augment_gain_max),
            offset: (self.augment_offset_min, self.augment_offset_max),
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            image_size: self.image_size,
            n_source: self.n_source,
            n_target: self.n_target,
            n_test: self.n_test,
            seed: self.data_seed,
            shift: self.shift,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n_source / self.batch_size
    }

    pub fn max_iter(&self) -> u64 {
        (self.epochs * self.batches_per_epoch()) as u64
    }

    /// Applies a named ablation variant on top of this config.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        let (enc, se, dec, target) = match variant {
            Variant::SourceOnly => (false, false, 0, false),
            Variant::NoEncAda => (false, true, NUM_SCALES, true),
            Variant::NoSeAda => (true, false, NUM_SCALES, true),
            Variant::Cada2D => (true, true, 1, true),
            Variant::Cada3D => (true, true, 2, true),
            Variant::Cada4D => (true, true, 3, true),
            Variant::Full => (true, true, NUM_SCALES, true),
        };
        c.enc_enabled = enc;
        c.se_enabled = se;
        c.num_dec_discs = dec;
        c.use_target = target;
        c
    }
}

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    SourceOnly,
    NoEncAda,
    NoSeAda,
    Cada2D,
    Cada3D,
    Cada4D,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::SourceOnly,
        Variant::NoEncAda,
        Variant::NoSeAda,
        Variant::Cada2D,
        Variant::Cada3D,
        Variant::Cada4D,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::NoEncAda => "no_enc_ada",
            Variant::NoSeAda => "no_se_ada",
            Variant::Cada2D => "cada_2d",
            Variant::Cada3D => "cada_3d",
            Variant::Cada4D => "cada_4d",
            Variant::Full => "full",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = RunConfig::from_toml("epochs = 3\nshift = 0.0\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.batch_size, 4);
        assert!(RunConfig::from_toml("epoch = 3").is_err());
        assert!(RunConfig::from_toml("image_size = 48").is_err());
        assert!(RunConfig::from_toml("lambda_adv_dec = -1.0").is_err());
        assert!(RunConfig::from_toml("use_target = false").is_err());
    }

    #[test]
    fn variants() {
        let base = RunConfig::default();
        let c = base.with_variant(Variant::Cada2D);
        assert_eq!((c.num_dec_discs, c.enc_enabled, c.se_enabled), (1, true, true));
        let s = base.with_variant(Variant::SourceOnly);
        assert!(s.flags().supervised_only() && !s.use_target);
        assert!(s.validate().is_ok());
        assert!("cada_5d".parse::<Variant>().is_err());
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn iteration_budget() {
        let c = RunConfig::default();
        assert_eq!(c.batches_per_epoch(), 50);
        assert_eq!(c.max_iter(), 1500);
    }
}
