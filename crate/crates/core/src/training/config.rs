use std::fmt::Write as _;
use std::path::Path;

use super::losses::LossConfig;
use super::optim::OptimConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::model::{ModelConfig, Variant};

/// Smallest crop, as a fraction of the sample area, used by default.
pub const CROP_MIN_AREA: f64 = 0.85;

/// Everything a training run needs besides its data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// Random square crops cover between this fraction and all of a sample.
    pub crop_min_area: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            crop_min_area: CROP_MIN_AREA,
        }
    }
}

fn parse<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config { line, msg: format!("bad value '{value}' for {key}") })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config { line, msg: format!("bad boolean '{value}' for {key}") }),
    }
}

impl TrainConfig {
    /// Toy-scale preset: `input_size` pixels, channels divided by `scale_factor`.
    pub fn toy(input_size: usize, scale_factor: usize) -> Self {
        TrainConfig { model: ModelConfig::toy(input_size, scale_factor), ..Default::default() }
    }

    /// Parses `key=value` lines over the defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let (mut size, mut scale) = (cfg.model.input_size, cfg.model.scale_factor);
        let mut model_keys = Vec::new();
        for (line, key, value) in io::parse_key_values(text)? {
            let v = value.as_str();
            match key.as_str() {
                "input_size" => size = parse(line, &key, v)?,
                "scale_factor" => scale = parse(line, &key, v)?,
                "variant" | "attention_layers" | "positional_encoding" => model_keys.push((line, key, value)),
                "lr_max" => cfg.optim.lr_max = parse(line, &key, v)?,
                "lr_min" => cfg.optim.lr_min = parse(line, &key, v)?,
                "warmup_steps" => cfg.optim.warmup_steps = Some(parse(line, &key, v)?),
                "epochs" => cfg.optim.epochs = parse(line, &key, v)?,
                "batch" => cfg.optim.batch = parse(line, &key, v)?,
                "weight_decay" => cfg.optim.weight_decay = parse(line, &key, v)?,
                "seed" => cfg.seed = parse(line, &key, v)?,
                "alpha" => cfg.loss.alpha = parse(line, &key, v)?,
                "line_loss_all_layers" => cfg.loss.line_loss_all_layers = parse_bool(line, &key, v)?,
                "crop_min_area" => cfg.crop_min_area = parse(line, &key, v)?,
                _ => return Err(Error::Config { line, msg: format!("unknown key '{key}'") }),
            }
        }
        if scale == 0 {
            return Err(Error::Config { line: 0, msg: "scale_factor must be at least 1".into() });
        }
        cfg.model = ModelConfig::scaled(size, scale);
        for (line, key, value) in model_keys {
            let v = value.as_str();
            match key.as_str() {
                "variant" => cfg.model.variant = v.parse::<Variant>().map_err(|e| Error::Config { line, msg: e.to_string() })?,
                "attention_layers" => cfg.model.attention_layers = parse(line, &key, v)?,
                _ => cfg.model.positional_encoding = parse_bool(line, &key, v)?,
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&io::read_text(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(Error::Config { line: 0, msg });
        if !(self.crop_min_area > 0.0 && self.crop_min_area <= 1.0) {
            return bad(format!("crop_min_area {} outside (0, 1]", self.crop_min_area));
        }
        if !(self.loss.alpha >= 0.0 && self.loss.alpha.is_finite()) {
            return bad(format!("alpha {} must be finite and non-negative", self.loss.alpha));
        }
        if self.optim.batch == 0 || self.optim.epochs == 0 {
            return bad("batch and epochs must be positive".into());
        }
        if !(self.optim.lr_min < self.optim.lr_max) || self.optim.lr_min < 0.0 {
            return bad(format!("need 0 <= lr_min < lr_max, got {} / {}", self.optim.lr_min, self.optim.lr_max));
        }
        Ok(())
    }

    /// Text that [`TrainConfig::parse`] maps back to `self`. Floats use the
    /// shortest representation that round-trips.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let o = &self.optim;
        writeln!(s, "input_size={}", m.input_size).unwrap();
        writeln!(s, "scale_factor={}", m.scale_factor).unwrap();
        writeln!(s, "variant={}", m.variant).unwrap();
        writeln!(s, "attention_layers={}", m.attention_layers).unwrap();
        writeln!(s, "positional_encoding={}", m.positional_encoding).unwrap();
        writeln!(s, "lr_max={:?}", o.lr_max).unwrap();
        writeln!(s, "lr_min={:?}", o.lr_min).unwrap();
        if let Some(w) = o.warmup_steps {
            writeln!(s, "warmup_steps={w}").unwrap();
        }
        writeln!(s, "epochs={}", o.epochs).unwrap();
        writeln!(s, "batch={}", o.batch).unwrap();
        writeln!(s, "weight_decay={:?}", o.weight_decay).unwrap();
        writeln!(s, "seed={}", self.seed).unwrap();
        writeln!(s, "alpha={:?}", self.loss.alpha).unwrap();
        writeln!(s, "line_loss_all_layers={}", self.loss.line_loss_all_layers).unwrap();
        writeln!(s, "crop_min_area={:?}", self.crop_min_area).unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let text = "# toy\ninput_size=64\nscale_factor=8\nlr_max=5e-3\nepochs=2\nbatch=8\nseed=3\nvariant=h_only\nline_loss_all_layers=false\n";
        let cfg = TrainConfig::parse(text).unwrap();
        assert_eq!(cfg.model, ModelConfig::toy(64, 8).with_variant(Variant::HOnly));
        assert_eq!(cfg.optim.lr_max, 5e-3);
        assert!(!cfg.loss.line_loss_all_layers);
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn defaults_are_published_values() {
        let cfg = TrainConfig::parse("").unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!((cfg.optim.batch, cfg.optim.epochs, cfg.loss.alpha), (28, 80, 5.0));
    }

    #[test]
    fn errors_carry_line_numbers() {
        for (text, want) in [("epochs=2\nlearning_rate=1\n", 2), ("\n\nbatch=x\n", 3), ("alpha\n", 1)] {
            match TrainConfig::parse(text) {
                Err(Error::Config { line, .. }) => assert_eq!(line, want, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(TrainConfig::parse("lr_min=1\nlr_max=0.1\n").is_err());
    }
}
