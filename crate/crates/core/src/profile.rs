//! Capture conditions attached to every trace.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub const UNDISCLOSED: &str = "Undisclosed";

/// Behavioral metadata keys carried with each profile. Values are opaque.
pub const BEHAVIORAL_KEYS: [&str; 4] = ["age_group", "gender", "political_alignment", "state_of_mind"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Os {
    Windows,
    Linux,
    Mac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Platform {
    Desktop,
    Laptop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrafficCondition {
    Morning,
    Noon,
    Night,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Connection {
    Wired,
    Wireless,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Browser {
    Chrome,
    Firefox,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OperationalProfile {
    pub os: Os,
    pub platform: Platform,
    pub traffic_condition: TrafficCondition,
    pub connection: Connection,
    pub browser: Browser,
    #[serde(default)]
    pub behavioral: BTreeMap<String, String>,
}

impl OperationalProfile {
    pub fn new(
        os: Os,
        platform: Platform,
        traffic_condition: TrafficCondition,
        connection: Connection,
        browser: Browser,
    ) -> Self {
        let behavioral = BEHAVIORAL_KEYS
            .iter()
            .map(|k| (k.to_string(), UNDISCLOSED.to_string()))
            .collect();
        Self {
            os,
            platform,
            traffic_condition,
            connection,
            browser,
            behavioral,
        }
    }

    /// File-name friendly tag such as `Windows_Desktop_Morning_Wired_Chrome`.
    pub fn slug(&self) -> String {
        format!(
            "{:?}_{:?}_{:?}_{:?}_{:?}",
            self.os, self.platform, self.traffic_condition, self.connection, self.browser
        )
    }
}

impl fmt::Display for OperationalProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({:?}, {:?}, {:?}, {:?}, {:?})",
            self.os, self.platform, self.traffic_condition, self.connection, self.browser
        )
    }
}

/// Every combination of the operational attributes, browser varying fastest
/// and OS slowest. Behavioral fields are all [`UNDISCLOSED`].
pub fn default_profiles() -> Vec<OperationalProfile> {
    let mut out = Vec::with_capacity(72);
    for os in [Os::Windows, Os::Linux, Os::Mac] {
        for platform in [Platform::Desktop, Platform::Laptop] {
            for tc in [
                TrafficCondition::Morning,
                TrafficCondition::Noon,
                TrafficCondition::Night,
            ] {
                for conn in [Connection::Wired, Connection::Wireless] {
                    for browser in [Browser::Chrome, Browser::Firefox] {
                        out.push(OperationalProfile::new(os, platform, tc, conn, browser));
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn cross_product_is_complete() {
        let profiles = default_profiles();
        assert_eq!(profiles.len(), 3 * 2 * 3 * 2 * 2);
        let unique: HashSet<_> = profiles.iter().collect();
        assert_eq!(unique.len(), profiles.len());
        assert!(profiles
            .iter()
            .all(|p| matches!(p.browser, Browser::Chrome | Browser::Firefox)));
        assert!(profiles
            .iter()
            .all(|p| BEHAVIORAL_KEYS.iter().all(|k| p.behavioral[*k] == UNDISCLOSED)));
    }

    #[test]
    fn json_shape() {
        let p = &default_profiles()[0];
        let json = serde_json::to_string(p).unwrap();
        assert!(json.starts_with(
            r#"{"os":"Windows","platform":"Desktop","traffic_condition":"Morning","connection":"Wired","browser":"Chrome","behavioral":{"#
        ));
        let back: OperationalProfile = serde_json::from_str(&json).unwrap();
        assert_eq!(&back, p);
        assert!(serde_json::from_str::<OperationalProfile>(&json.replace("Windows", "BeOS")).is_err());
    }
}
