use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How devices reach host memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HostLinkModel {
    /// One host path shared by every device; transfers serialize on it.
    #[default]
    Shared,
    /// An independent host link per device.
    PerDevice,
}

/// How device-to-device transfers contend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeerModel {
    /// Each device has one egress and one ingress port at `peer_bw`.
    #[default]
    PortSerialized,
    /// A dedicated link per ordered device pair, no port contention.
    FullBisection,
    /// One bus shared by all peer transfers.
    SharedBus,
}

/// Interconnect parameters. Bandwidths are in parameters per second,
/// latency in seconds per message.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkTopology {
    pub host_bw: f64,
    pub peer_bw: f64,
    pub latency: f64,
    pub devices: usize,
    #[serde(default)]
    pub host_link: HostLinkModel,
    #[serde(default)]
    pub peer_model: PeerModel,
}

impl LinkTopology {
    pub fn new(host_bw: f64, peer_bw: f64, latency: f64, devices: usize) -> Result<Self> {
        let t = LinkTopology {
            host_bw,
            peer_bw,
            latency,
            devices,
            host_link: HostLinkModel::default(),
            peer_model: PeerModel::default(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn with_host_link(mut self, m: HostLinkModel) -> Self {
        self.host_link = m;
        self
    }

    pub fn with_peer_model(mut self, m: PeerModel) -> Self {
        self.peer_model = m;
        self
    }

    pub fn with_devices(mut self, devices: usize) -> Self {
        self.devices = devices;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bw_ok = |b: f64| b.is_finite() && b > 0.0;
        if !bw_ok(self.host_bw) || !bw_ok(self.peer_bw) {
            return Err(Error::Config(format!(
                "bandwidths must be positive and finite (host {}, peer {})",
                self.host_bw, self.peer_bw
            )));
        }
        if !(self.latency.is_finite() && self.latency >= 0.0) {
            return Err(Error::Config(format!("latency must be non-negative, got {}", self.latency)));
        }
        if self.devices == 0 {
            return Err(Error::Config("topology needs at least one device".into()));
        }
        if self.peer_bw < self.host_bw {
            log::warn!(
                "peer bandwidth {} is below host bandwidth {}; slicing will not pay off",
                self.peer_bw,
                self.host_bw
            );
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: LinkTopology = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }

    /// Built-in profiles, by name.
    pub fn profile(name: &str) -> Result<Self> {
        let t = match name {
            // PCIe-class host link with a 6x faster peer fabric.
            "pcie-nvlink" => LinkTopology::new(4.0e9, 24.0e9, 5.0e-6, 4)?,
            "pcie-fast-peer" => LinkTopology::new(4.0e9, 48.0e9, 2.0e-6, 8)?,
            "uniform" => LinkTopology::new(1.0, 1.0, 0.0, 4)?,
            _ => return Err(Error::Config(format!("unknown topology profile {name:?}"))),
        };
        Ok(t)
    }

    pub fn profile_names() -> &'static [&'static str] {
        &["pcie-nvlink", "pcie-fast-peer", "uniform"]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_and_json() {
        assert!(LinkTopology::new(0.0, 1.0, 0.0, 1).is_err());
        assert!(LinkTopology::new(1.0, 1.0, -1.0, 1).is_err());
        assert!(LinkTopology::new(1.0, 1.0, 0.0, 0).is_err());
        let t = LinkTopology::from_json(r#"{"host_bw": 1, "peer_bw": 6, "latency": 0, "devices": 4}"#).unwrap();
        assert_eq!(t.host_link, HostLinkModel::Shared);
        assert_eq!(t.peer_model, PeerModel::PortSerialized);
        assert!(LinkTopology::from_json(r#"{"host_bw": 1}"#).is_err());
        for n in LinkTopology::profile_names() {
            LinkTopology::profile(n).unwrap();
        }
    }
}
