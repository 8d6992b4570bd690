//! Built-in study configurations.

pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub toml: &'static str,
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "advection_sigma_sweep",
        description: "reduced moments at full initial rank against full-order moments for several noise levels",
        toml: include_str!("../presets/advection_sigma_sweep.toml"),
    },
    Preset {
        name: "advection_rank_sweep",
        description: "reduced moment errors, best approximations and tracking iRMSE across ranks",
        toml: include_str!("../presets/advection_rank_sweep.toml"),
    },
    Preset {
        name: "advection_poc",
        description: "Euler-Maruyama particle errors against the reduced moments over ensemble sizes",
        toml: include_str!("../presets/advection_poc.toml"),
    },
    Preset {
        name: "fem_full_rmse",
        description: "pollution model, full observation: small and large full ensembles against a reduced ensemble",
        toml: include_str!("../presets/fem_full_rmse.toml"),
    },
    Preset {
        name: "fem_partial_rmse",
        description: "pollution model, square-average observation: same filters as fem_full_rmse",
        toml: include_str!("../presets/fem_partial_rmse.toml"),
    },
    Preset {
        name: "fem_consistency",
        description: "noise-free pollution model: matched-particle distance between full and reduced ensembles",
        toml: include_str!("../presets/fem_consistency.toml"),
    },
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn every_preset_resolves() {
        for p in PRESETS {
            let cfg = RunConfig::from_toml(p.toml).and_then(|c| c.resolve());
            assert!(cfg.is_ok(), "{}: {:?}", p.name, cfg.err());
        }
    }
}
