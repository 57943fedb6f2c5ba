//! Target domains: per-class recolor targets plus a global affine tone.

use super::AugmentError;
use crate::image::{ClassId, Rgb};
use crate::palette::Palette;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// `out = matrix · in + offset`, per pixel, rounded and clamped to `[0, 255]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tone {
    pub matrix: [[f64; 3]; 3],
    pub offset: [f64; 3],
}

impl Tone {
    pub const IDENTITY: Tone = Tone {
        matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        offset: [0.0; 3],
    };

    pub fn diagonal(gain: [f64; 3], offset: [f64; 3]) -> Tone {
        Tone {
            matrix: [[gain[0], 0.0, 0.0], [0.0, gain[1], 0.0], [0.0, 0.0, gain[2]]],
            offset,
        }
    }

    pub fn apply_f(&self, px: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = m[c][0] * px[0] + m[c][1] * px[1] + m[c][2] * px[2] + self.offset[c];
        }
        out
    }

    pub fn apply(&self, px: Rgb) -> Rgb {
        to_rgb(self.apply_f([px[0] as f64, px[1] as f64, px[2] as f64]))
    }

    pub fn is_finite(&self) -> bool {
        self.matrix.iter().flatten().chain(&self.offset).all(|v| v.is_finite())
    }
}

pub fn to_rgb(v: [f64; 3]) -> Rgb {
    v.map(|c| c.round().clamp(0.0, 255.0) as u8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub per_class_color: BTreeMap<ClassId, Rgb>,
    pub tone: Tone,
}

pub const BUILTIN_NAMES: [&str; 9] = [
    "sunny",
    "summer",
    "afternoon",
    "autumn",
    "desert",
    "winter",
    "dust_storm",
    "forest",
    "night",
];

impl DomainSpec {
    /// Domain whose background target is `background` and whose other
    /// targets are the tone-mapped simulator colors.
    pub fn from_tone(name: &str, tone: Tone, background: Rgb) -> DomainSpec {
        let palette = Palette::simulator();
        let per_class_color = palette
            .entries()
            .iter()
            .map(|&(c, rgb)| {
                let target = if c == ClassId::BACKGROUND {
                    background
                } else {
                    tone.apply(rgb)
                };
                (c, target)
            })
            .collect();
        DomainSpec {
            name: name.to_string(),
            per_class_color,
            tone,
        }
    }

    /// Uniform shift of every simulator color by `magnitude` levels.
    pub fn palette_shift(name: &str, magnitude: f64) -> DomainSpec {
        let tone = Tone::diagonal([1.0; 3], [magnitude, magnitude * 0.5, -magnitude]);
        let bg = tone.apply(Palette::simulator().color(ClassId::BACKGROUND).unwrap());
        DomainSpec::from_tone(name, tone, bg)
    }

    pub fn builtin(name: &str) -> Option<DomainSpec> {
        let d = Tone::diagonal;
        let spec = match name {
            "sunny" => DomainSpec::from_tone(name, d([1.05; 3], [6.0, 6.0, 0.0]), [58, 118, 46]),
            "summer" => DomainSpec::from_tone(name, d([1.0, 1.02, 0.96], [8.0, 6.0, -4.0]), [52, 126, 38]),
            "afternoon" => {
                DomainSpec::from_tone(name, d([1.05, 1.0, 0.92], [12.0, 4.0, 0.0]), [66, 108, 40])
            }
            "autumn" => DomainSpec::from_tone(name, d([1.1, 0.85, 0.7], [22.0, 6.0, 0.0]), [150, 92, 34]),
            "desert" => DomainSpec::from_tone(name, d([1.1, 1.0, 0.75], [34.0, 22.0, 0.0]), [196, 168, 112]),
            "winter" => DomainSpec::from_tone(name, d([0.8; 3], [40.0, 45.0, 55.0]), [226, 232, 240]),
            "dust_storm" => {
                DomainSpec::from_tone(name, d([0.45; 3], [112.0, 86.0, 46.0]), [150, 112, 66])
            }
            "forest" => DomainSpec::from_tone(name, d([0.55, 0.8, 0.5], [0.0, 22.0, 0.0]), [18, 72, 24]),
            "night" => DomainSpec::from_tone(name, d([0.3; 3], [0.0, 0.0, 20.0]), [20, 20, 45]),
            _ => return None,
        };
        Some(spec)
    }

    pub fn builtins() -> Vec<DomainSpec> {
        BUILTIN_NAMES
            .iter()
            .map(|n| DomainSpec::builtin(n).expect("builtin"))
            .collect()
    }

    /// A builtin name, or a path to a JSON/TOML domain file.
    pub fn resolve(name_or_path: &str) -> Result<DomainSpec, AugmentError> {
        if let Some(d) = DomainSpec::builtin(name_or_path) {
            return Ok(d);
        }
        let path = std::path::Path::new(name_or_path);
        if !path.exists() {
            return Err(AugmentError::UnknownDomain(name_or_path.to_string()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| AugmentError::InvalidDomain(format!("{name_or_path}: {e}")))?;
        let spec: DomainSpec = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| AugmentError::InvalidDomain(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| AugmentError::InvalidDomain(e.to_string()))?
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        for c in ClassId::ALL {
            if !self.per_class_color.contains_key(&c) {
                return Err(AugmentError::InvalidDomain(format!(
                    "domain {} has no target color for {c}",
                    self.name
                )));
            }
        }
        if !self.tone.is_finite() {
            return Err(AugmentError::InvalidDomain(format!(
                "domain {} has a non-finite tone",
                self.name
            )));
        }
        Ok(())
    }

    pub fn target(&self, class: ClassId) -> Rgb {
        self.per_class_color
            .get(&class)
            .copied()
            .unwrap_or_else(|| self.per_class_color[&ClassId::BACKGROUND])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_valid_and_named() {
        let all = DomainSpec::builtins();
        assert_eq!(all.len(), 9);
        for d in &all {
            d.validate().unwrap();
        }
        assert!(DomainSpec::builtin("mars").is_none());
    }

    #[test]
    fn tone_rounds_and_clamps() {
        let t = Tone::diagonal([2.0, 0.5, 1.0], [0.0, 0.25, -300.0]);
        assert_eq!(t.apply([200, 3, 100]), [255, 2, 0]);
        assert_eq!(Tone::IDENTITY.apply([1, 2, 3]), [1, 2, 3]);
    }

    #[test]
    fn domain_files_round_trip() {
        let d = DomainSpec::builtin("night").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("night.json");
        std::fs::write(&p, serde_json::to_string(&d).unwrap()).unwrap();
        assert_eq!(DomainSpec::resolve(p.to_str().unwrap()).unwrap(), d);
        let p = dir.path().join("night.toml");
        std::fs::write(&p, toml::to_string(&d).unwrap()).unwrap();
        assert_eq!(DomainSpec::resolve(p.to_str().unwrap()).unwrap(), d);
    }
}
