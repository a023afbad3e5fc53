use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Anchor colors offered to the analyst. The first two are the default pair
/// for a two-anchor session.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Orange,
    Purple,
    Teal,
    Red,
    Blue,
    Green,
    Brown,
    Pink,
}

impl Color {
    pub const PALETTE: [Color; 8] = [
        Color::Orange,
        Color::Purple,
        Color::Teal,
        Color::Red,
        Color::Blue,
        Color::Green,
        Color::Brown,
        Color::Pink,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Color::Orange => "orange",
            Color::Purple => "purple",
            Color::Teal => "teal",
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Brown => "brown",
            Color::Pink => "pink",
        }
    }

    pub fn hex(self) -> &'static str {
        match self {
            Color::Orange => "#e6852d",
            Color::Purple => "#8e5bbf",
            Color::Teal => "#2a9d8f",
            Color::Red => "#d1495b",
            Color::Blue => "#3d7fc1",
            Color::Green => "#5a9e45",
            Color::Brown => "#8c6239",
            Color::Pink => "#e377c2",
        }
    }

    /// Palette entry `i`, wrapping around.
    pub fn nth(i: usize) -> Color {
        Self::PALETTE[i % Self::PALETTE.len()]
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown color `{0}`")]
pub struct UnknownColor(pub String);

impl FromStr for Color {
    type Err = UnknownColor;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::PALETTE
            .into_iter()
            .find(|c| c.token().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownColor(s.to_owned()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_round_trip() {
        for c in Color::PALETTE {
            assert_eq!(c.token().parse::<Color>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{c}\""));
        }
        assert!("mauve".parse::<Color>().is_err());
        assert_eq!(Color::nth(0), Color::Orange);
        assert_eq!(Color::nth(1), Color::Purple);
    }
}
