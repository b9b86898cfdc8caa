//! Modality labels and the hard expert partition.

use std::fmt;
use std::str::FromStr;

/// One of the six token modalities.
///
/// Declaration order is the fixed tiebreak priority used when two tokens
/// share a timestamp: `text < speech < face < upper < lower < hands`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Speech,
    Face,
    Upper,
    Lower,
    Hands,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::Text,
        Modality::Speech,
        Modality::Face,
        Modality::Upper,
        Modality::Lower,
        Modality::Hands,
    ];

    pub const BODY: [Modality; 3] = [Modality::Upper, Modality::Lower, Modality::Hands];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Speech => "speech",
            Modality::Face => "face",
            Modality::Upper => "upper",
            Modality::Lower => "lower",
            Modality::Hands => "hands",
        }
    }

    /// Position in [`Modality::ALL`]; also the tiebreak priority.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Member of the text+speech anchor set.
    pub fn is_ts(self) -> bool {
        matches!(self, Modality::Text | Modality::Speech)
    }

    pub fn is_motion(self) -> bool {
        !self.is_ts()
    }

    pub fn is_body(self) -> bool {
        matches!(self, Modality::Upper | Modality::Lower | Modality::Hands)
    }

    pub fn expert(self) -> Expert {
        match self {
            Modality::Text | Modality::Speech => Expert::Ts,
            Modality::Face => Expert::Face,
            Modality::Upper | Modality::Lower | Modality::Hands => Expert::Body,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown modality '{0}'")]
pub struct UnknownModality(pub String);

impl FromStr for Modality {
    type Err = UnknownModality;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| UnknownModality(s.to_string()))
    }
}

/// The three parameter groups tokens are hard-routed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Expert {
    Ts,
    Face,
    Body,
}

impl Expert {
    pub const ALL: [Expert; 3] = [Expert::Ts, Expert::Face, Expert::Body];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Expert::Ts => "ts",
            Expert::Face => "face",
            Expert::Body => "body",
        }
    }
}

impl fmt::Display for Expert {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_partition_the_labels() {
        let ts: Vec<_> = Modality::ALL.iter().filter(|m| m.is_ts()).collect();
        let face: Vec<_> = Modality::ALL
            .iter()
            .filter(|m| m.expert() == Expert::Face)
            .collect();
        let body: Vec<_> = Modality::ALL.iter().filter(|m| m.is_body()).collect();
        assert_eq!(ts.len() + face.len() + body.len(), 6);
        assert_eq!(ts, [&Modality::Text, &Modality::Speech]);
        assert_eq!(face, [&Modality::Face]);
    }

    #[test]
    fn names_round_trip() {
        for m in Modality::ALL {
            assert_eq!(m.name().parse::<Modality>().unwrap(), m);
        }
        assert!("audio".parse::<Modality>().is_err());
    }

    #[test]
    fn priority_follows_declaration() {
        assert!(Modality::Text < Modality::Speech);
        assert!(Modality::Speech < Modality::Face);
        assert!(Modality::Lower < Modality::Hands);
    }
}
