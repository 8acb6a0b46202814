//! Protection modes and the instruction features they enable.

use std::fmt;
use std::str::FromStr;

/// Which protections a runtime enforces. All flags off is the baseline:
/// explicit software bounds checks and no tagging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Mode {
    /// Tagged segments inside a guest (heap and stack safety).
    pub internal: bool,
    /// Tag-based sandboxing of guests against each other and the runtime.
    pub external: bool,
    /// Pointer signing and authentication.
    pub ptr_auth: bool,
}

impl Mode {
    pub const BASELINE: Mode = Mode {
        internal: false,
        external: false,
        ptr_auth: false,
    };
    pub const INTERNAL: Mode = Mode {
        internal: true,
        external: false,
        ptr_auth: false,
    };
    pub const EXTERNAL: Mode = Mode {
        internal: false,
        external: true,
        ptr_auth: false,
    };
    pub const PTR_AUTH: Mode = Mode {
        internal: false,
        external: false,
        ptr_auth: true,
    };
    pub const COMBINED: Mode = Mode {
        internal: true,
        external: true,
        ptr_auth: false,
    };
    pub const FULL: Mode = Mode {
        internal: true,
        external: true,
        ptr_auth: true,
    };

    pub fn is_combined(self) -> bool {
        self.internal && self.external
    }

    /// Whether memory accesses compare pointer tags against granule tags.
    pub fn tag_checked(self) -> bool {
        self.internal || self.external
    }

    /// Whether accesses are bounds checked against the instance memory in
    /// software. Tag-based sandboxing replaces these checks.
    pub fn bounds_checked(self) -> bool {
        !self.external
    }

    pub fn features(self) -> FeatureSet {
        FeatureSet {
            segments: self.internal,
            ptr_auth: self.ptr_auth,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.internal {
            parts.push("internal");
        }
        if self.external {
            parts.push("external");
        }
        if self.ptr_auth {
            parts.push("ptrauth");
        }
        if parts.is_empty() {
            f.write_str("baseline")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("unknown mode '{0}' (expected a comma list of internal, external, ptrauth)")]
pub struct ModeParseError(pub String);

impl FromStr for Mode {
    type Err = ModeParseError;

    /// Parses a comma list such as `internal,ptrauth`. The empty string and
    /// `baseline` both denote the baseline.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut mode = Mode::BASELINE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "internal" => mode.internal = true,
                "external" => mode.external = true,
                "ptrauth" | "ptr-auth" | "ptr_auth" => mode.ptr_auth = true,
                "baseline" => {}
                other => return Err(ModeParseError(other.to_string())),
            }
        }
        Ok(mode)
    }
}

/// Optional instruction groups a module may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureSet {
    /// `segment.new`, `segment.set_tag`, `segment.free`.
    pub segments: bool,
    /// `i64.pointer_sign`, `i64.pointer_auth`.
    pub ptr_auth: bool,
}

impl FeatureSet {
    pub const NONE: FeatureSet = FeatureSet {
        segments: false,
        ptr_auth: false,
    };
    pub const ALL: FeatureSet = FeatureSet {
        segments: true,
        ptr_auth: true,
    };

    pub fn contains(self, other: FeatureSet) -> bool {
        (self.segments || !other.segments) && (self.ptr_auth || !other.ptr_auth)
    }
}

impl Default for FeatureSet {
    fn default() -> Self {
        Self::ALL
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_modes() {
        assert_eq!("".parse::<Mode>().unwrap(), Mode::BASELINE);
        assert_eq!("internal".parse::<Mode>().unwrap(), Mode::INTERNAL);
        assert_eq!(
            "internal,external,ptrauth".parse::<Mode>().unwrap(),
            Mode::FULL
        );
        assert!("turbo".parse::<Mode>().is_err());
        assert_eq!(Mode::COMBINED.to_string(), "internal,external");
    }

    #[test]
    fn features_follow_mode() {
        assert_eq!(Mode::BASELINE.features(), FeatureSet::NONE);
        assert!(Mode::INTERNAL.features().segments);
        assert!(!Mode::EXTERNAL.features().segments);
        assert!(Mode::PTR_AUTH.features().ptr_auth);
        assert!(FeatureSet::ALL.contains(FeatureSet::NONE));
        assert!(!FeatureSet::NONE.contains(FeatureSet::ALL));
    }
}
