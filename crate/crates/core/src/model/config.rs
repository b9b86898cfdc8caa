use crate::config::{invalid, parse_assignments, render, value, ConfigError};
use crate::modality::Modality;
use crate::mome::{LayerDims, Topology};
use crate::streams::{VocabSizes, MASTER_FPS};
use crate::timeline::PhaseAffine;

/// Architecture and timing of an SLB model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Vocabulary size per modality; the last id of each is reserved.
    pub vocab: VocabSizes,
    pub rope_base: f64,
    /// Rotary width per head; `None` rotates the whole head.
    pub d_rot: Option<usize>,
    pub affine: PhaseAffine,
    pub enable_face_body: bool,
    pub cross_attention: bool,
    /// Round motion indices to integers before the phase map.
    pub integer_rope: bool,
    /// Route every position through the text/speech expert.
    pub tie_experts: bool,
    pub ln_eps: f64,
    pub rate_text: f64,
    pub rate_speech: f64,
    pub rate_face: f64,
    pub rate_body: f64,
    pub rate_master: f64,
    /// Repeating generation pattern of (modality, count) blocks.
    pub schedule: Vec<(Modality, usize)>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            vocab: VocabSizes([256, 512, 128, 64, 64, 64]),
            rope_base: 10_000.0,
            d_rot: None,
            affine: PhaseAffine::default(),
            enable_face_body: false,
            cross_attention: true,
            integer_rope: false,
            tie_experts: false,
            ln_eps: 1e-5,
            rate_text: 12.5,
            rate_speech: 12.5,
            rate_face: 25.0,
            rate_body: 6.25,
            rate_master: MASTER_FPS,
            schedule: vec![(Modality::Text, 13), (Modality::Speech, 26)],
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    value(key, v)
}

pub fn parse_schedule(key: &str, v: &str) -> Result<Vec<(Modality, usize)>, ConfigError> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|block| {
            let (m, n) = block
                .split_once(':')
                .ok_or_else(|| invalid(key, format!("block '{block}' is not modality:count")))?;
            Ok((value::<Modality>(key, m.trim())?, value::<usize>(key, n.trim())?))
        })
        .collect()
}

pub fn schedule_text(schedule: &[(Modality, usize)]) -> String {
    schedule
        .iter()
        .map(|(m, n)| format!("{m}:{n}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl ModelConfig {
    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        if let Some(rest) = key.strip_prefix("vocab.") {
            let m = modality_key(key, rest)?;
            self.vocab.0[m.index()] = value(key, v)?;
            return Ok(());
        }
        if let Some(rest) = key.strip_prefix("gamma.") {
            let m = modality_key(key, rest)?;
            self.affine.gamma[m.index()] = value(key, v)?;
            return Ok(());
        }
        if let Some(rest) = key.strip_prefix("delta.") {
            let m = modality_key(key, rest)?;
            self.affine.delta[m.index()] = value(key, v)?;
            return Ok(());
        }
        match key {
            "d" => self.d = value(key, v)?,
            "n_layers" => self.n_layers = value(key, v)?,
            "n_heads" => self.n_heads = value(key, v)?,
            "d_ff" => self.d_ff = value(key, v)?,
            "rope.base" => self.rope_base = value(key, v)?,
            "rope.d_rot" => {
                self.d_rot = if v == "auto" {
                    None
                } else {
                    Some(value(key, v)?)
                }
            }
            "enable_face_body" => self.enable_face_body = parse_bool(key, v)?,
            "cross_attention" => self.cross_attention = parse_bool(key, v)?,
            "integer_rope" => self.integer_rope = parse_bool(key, v)?,
            "tie_experts" => self.tie_experts = parse_bool(key, v)?,
            "ln_eps" => self.ln_eps = value(key, v)?,
            "rate.text" => self.rate_text = value(key, v)?,
            "rate.speech" => self.rate_speech = value(key, v)?,
            "rate.face" => self.rate_face = value(key, v)?,
            "rate.body" => self.rate_body = value(key, v)?,
            "rate.master" => self.rate_master = value(key, v)?,
            "schedule" => self.schedule = parse_schedule(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every key with its current value.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e: Vec<(String, String)> = vec![
            ("d".into(), self.d.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("rope.base".into(), self.rope_base.to_string()),
            (
                "rope.d_rot".into(),
                self.d_rot.map_or("auto".into(), |r| r.to_string()),
            ),
            ("enable_face_body".into(), self.enable_face_body.to_string()),
            ("cross_attention".into(), self.cross_attention.to_string()),
            ("integer_rope".into(), self.integer_rope.to_string()),
            ("tie_experts".into(), self.tie_experts.to_string()),
            ("ln_eps".into(), self.ln_eps.to_string()),
            ("rate.text".into(), self.rate_text.to_string()),
            ("rate.speech".into(), self.rate_speech.to_string()),
            ("rate.face".into(), self.rate_face.to_string()),
            ("rate.body".into(), self.rate_body.to_string()),
            ("rate.master".into(), self.rate_master.to_string()),
            ("schedule".into(), schedule_text(&self.schedule)),
        ];
        for m in Modality::ALL {
            let i = m.index();
            e.push((format!("vocab.{m}"), self.vocab.0[i].to_string()));
            e.push((format!("gamma.{m}"), self.affine.gamma[i].to_string()));
            e.push((format!("delta.{m}"), self.affine.delta[i].to_string()));
        }
        e
    }

    /// Canonical key-sorted text.
    pub fn to_text(&self) -> String {
        render(self.entries())
    }

    /// Defaults overridden by the assignments of `text`, validated.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ModelConfig::default();
        for (k, v) in parse_assignments(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads.max(1)
    }

    pub fn rotary_dim(&self) -> usize {
        self.d_rot.unwrap_or_else(|| self.head_dim())
    }

    pub fn layer_dims(&self) -> LayerDims {
        LayerDims {
            d: self.d,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            eps: self.ln_eps,
        }
    }

    pub fn topology(&self) -> Topology {
        Topology {
            face_body: self.enable_face_body,
            cross: self.cross_attention,
        }
    }

    /// Emission rate of a modality in tokens per second.
    pub fn rate(&self, m: Modality) -> f64 {
        match m {
            Modality::Text => self.rate_text,
            Modality::Speech => self.rate_speech,
            Modality::Face => self.rate_face,
            _ => self.rate_body,
        }
    }

    /// Reserved end-of-block / no-antecedent id of a modality.
    pub fn reserved_id(&self, m: Modality) -> u32 {
        (self.vocab.get(m) - 1) as u32
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (key, n) in [
            ("d", self.d),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ] {
            if n == 0 {
                return Err(invalid(key, "must be positive"));
            }
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return Err(invalid(
                "n_heads",
                format!("width {} is not divisible by {} heads", self.d, self.n_heads),
            ));
        }
        let r = self.rotary_dim();
        if r < 2 || !r.is_multiple_of(2) || r > self.head_dim() {
            return Err(invalid(
                "rope.d_rot",
                format!("must be even, at least 2 and at most the head width {}", self.head_dim()),
            ));
        }
        if !(self.rope_base > 1.0) || !self.rope_base.is_finite() {
            return Err(invalid("rope.base", "must exceed 1"));
        }
        for m in Modality::ALL {
            if self.vocab.get(m) < 2 {
                return Err(invalid(&format!("vocab.{m}"), "needs at least 2 ids"));
            }
        }
        self.affine
            .validate()
            .map_err(|e| invalid("gamma/delta", e.to_string()))?;
        if !(self.ln_eps > 0.0) {
            return Err(invalid("ln_eps", "must be positive"));
        }
        for (key, r) in [
            ("rate.text", self.rate_text),
            ("rate.speech", self.rate_speech),
            ("rate.face", self.rate_face),
            ("rate.body", self.rate_body),
            ("rate.master", self.rate_master),
        ] {
            if !(r > 0.0) || !r.is_finite() {
                return Err(invalid(key, "must be positive"));
            }
        }
        if self.schedule.iter().any(|&(_, n)| n == 0) {
            return Err(invalid("schedule", "block counts must be positive"));
        }
        Ok(())
    }
}

fn modality_key(key: &str, name: &str) -> Result<Modality, ConfigError> {
    name.parse::<Modality>()
        .map_err(|_| ConfigError::UnknownKey(key.to_string()))
}
