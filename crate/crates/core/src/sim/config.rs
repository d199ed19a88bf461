use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chord::DEFAULT_RING_BITS;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// Which senders contend for the same transmission server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelScope {
    /// One medium shared by every network.
    #[default]
    Shared,
    /// An independent medium per network.
    PerNetwork,
}

/// Complete description of one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_networks: u32,
    pub nodes_per_network: u32,
    pub num_groups: u32,
    pub nodes_per_group: u32,
    /// Packets per second per active sender.
    pub flow_rate_pps: f64,
    pub packet_size_bytes: u32,
    pub data_rate_bps: u64,
    /// Packets generated per active sender.
    pub total_packets: u64,
    pub prop_delay_s: f64,
    /// Latency of one sink-to-sink overlay hop.
    pub sink_link_delay_s: f64,
    pub base_loss_prob: f64,
    pub out_of_range_loss_prob: f64,
    pub range_m: f64,
    /// Packets a channel holds, including the one in transmission.
    pub queue_capacity_pkts: u32,
    pub seed: u64,
    pub duration_s: f64,
    /// Per-network mobility flag; `None` means network 1 fixed, the rest mobile.
    pub mobile_networks: Option<Vec<bool>>,
    pub mobility_speed_mps: f64,
    /// Width and height of each network's region in meters.
    pub mobility_bounds_m: [f64; 2],
    pub mobility_step_s: f64,
    pub channel_scope: ChannelScope,
    pub ring_bits: u32,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_networks: 3,
            nodes_per_network: 20,
            num_groups: 3,
            nodes_per_group: 9,
            flow_rate_pps: 8.0,
            packet_size_bytes: 512,
            data_rate_bps: 1_000_000,
            total_packets: 2000,
            prop_delay_s: 0.001,
            sink_link_delay_s: 0.002,
            base_loss_prob: 0.02,
            out_of_range_loss_prob: 0.25,
            range_m: 60.0,
            queue_capacity_pkts: 50,
            seed: 1,
            duration_s: 3600.0,
            mobile_networks: None,
            mobility_speed_mps: 1.0,
            mobility_bounds_m: [100.0, 100.0],
            mobility_step_s: 1.0,
            channel_scope: ChannelScope::Shared,
            ring_bits: DEFAULT_RING_BITS,
        }
    }
}

impl ScenarioConfig {
    pub fn total_nodes(&self) -> u32 {
        self.num_networks * self.nodes_per_network
    }

    pub fn active_senders(&self) -> u32 {
        self.num_groups * self.nodes_per_group
    }

    pub fn is_mobile(&self, network: u32) -> bool {
        match &self.mobile_networks {
            Some(flags) => flags.get(network as usize).copied().unwrap_or(false),
            None => network > 0,
        }
    }

    /// Offered bit rate of all active senders, in bits per second.
    pub fn offered_load_bps(&self) -> f64 {
        f64::from(self.active_senders()) * self.flow_rate_pps * f64::from(self.packet_size_bytes) * 8.0
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn positive(field: &'static str, v: f64) -> Result<(), ConfigError> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(field, format!("must be positive, got {v}")))
            }
        }
        fn non_negative(field: &'static str, v: f64) -> Result<(), ConfigError> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(invalid(field, format!("must be non-negative, got {v}")))
            }
        }
        fn probability(field: &'static str, v: f64) -> Result<(), ConfigError> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(field, format!("must be within [0, 1], got {v}")))
            }
        }
        fn nonzero(field: &'static str, v: u64) -> Result<(), ConfigError> {
            if v > 0 {
                Ok(())
            } else {
                Err(invalid(field, "must be positive"))
            }
        }

        nonzero("num_networks", self.num_networks.into())?;
        nonzero("nodes_per_network", self.nodes_per_network.into())?;
        nonzero("num_groups", self.num_groups.into())?;
        nonzero("nodes_per_group", self.nodes_per_group.into())?;
        if u64::from(self.num_groups) * u64::from(self.nodes_per_group)
            > u64::from(self.num_networks) * u64::from(self.nodes_per_network)
        {
            return Err(invalid(
                "nodes_per_group",
                format!(
                    "{} groups x {} nodes exceeds {} sensors",
                    self.num_groups,
                    self.nodes_per_group,
                    self.total_nodes()
                ),
            ));
        }
        positive("flow_rate_pps", self.flow_rate_pps)?;
        nonzero("packet_size_bytes", self.packet_size_bytes.into())?;
        nonzero("data_rate_bps", self.data_rate_bps)?;
        nonzero("total_packets", self.total_packets)?;
        non_negative("prop_delay_s", self.prop_delay_s)?;
        non_negative("sink_link_delay_s", self.sink_link_delay_s)?;
        probability("base_loss_prob", self.base_loss_prob)?;
        probability("out_of_range_loss_prob", self.out_of_range_loss_prob)?;
        positive("range_m", self.range_m)?;
        nonzero("queue_capacity_pkts", self.queue_capacity_pkts.into())?;
        positive("duration_s", self.duration_s)?;
        if let Some(flags) = &self.mobile_networks {
            if flags.len() != self.num_networks as usize {
                return Err(invalid(
                    "mobile_networks",
                    format!("expected {} entries, got {}", self.num_networks, flags.len()),
                ));
            }
        }
        non_negative("mobility_speed_mps", self.mobility_speed_mps)?;
        positive("mobility_bounds_m", self.mobility_bounds_m[0])?;
        positive("mobility_bounds_m", self.mobility_bounds_m[1])?;
        positive("mobility_step_s", self.mobility_step_s)?;
        if !(1..=32).contains(&self.ring_bits) {
            return Err(invalid("ring_bits", "must be within 1..=32"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.total_nodes(), 60);
        assert!(!cfg.is_mobile(0));
        assert!(cfg.is_mobile(1) && cfg.is_mobile(2));
    }

    #[test]
    fn too_many_group_members() {
        let cfg = ScenarioConfig {
            num_groups: 7,
            nodes_per_group: 9,
            ..Default::default()
        };
        assert!(matches!(
            cfg.validate(),
            Err(ConfigError::Invalid { field: "nodes_per_group", .. })
        ));
    }

    #[test]
    fn probabilities_checked() {
        let cfg = ScenarioConfig {
            base_loss_prob: 1.5,
            ..Default::default()
        };
        assert!(matches!(
            cfg.validate(),
            Err(ConfigError::Invalid { field: "base_loss_prob", .. })
        ));
    }

    #[test]
    fn mobility_flags_must_cover_networks() {
        let cfg = ScenarioConfig {
            mobile_networks: Some(vec![true]),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
