//! Synthetic city, population and dataset files.

pub mod city;
pub mod io;
pub mod population;
pub mod split;

use serde::{Deserialize, Serialize};

pub use city::{generate_city, AdminId, CityGrid};
pub use io::{read_trajectories, write_trajectories, DatasetHeader};
pub use population::{
    generate_population, generate_population_with, generate_trajectories,
    generate_trajectories_with, AgentProfile, PopulationParams, RoutineParams, Template,
};
pub use split::{split_dataset, DatasetSplit};

use crate::error::Result;
use crate::traj::UserHistory;

/// Everything needed to generate one synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub agents: usize,
    pub days: usize,
    pub slots_per_day: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    pub admins: usize,
    pub population: PopulationParams,
    pub routine: RoutineParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            agents: 200,
            days: 28,
            slots_per_day: 24,
            grid_width: 20,
            grid_height: 20,
            admins: 16,
            population: PopulationParams::default(),
            routine: RoutineParams::default(),
        }
    }
}

/// A generated corpus held in memory.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub header: DatasetHeader,
    pub grid: CityGrid,
    pub agents: Vec<AgentProfile>,
    pub histories: Vec<UserHistory>,
    pub split: DatasetSplit,
}

pub fn synthesize(config: &SynthConfig) -> Result<SyntheticCorpus> {
    let grid = generate_city(config.seed, config.grid_width, config.grid_height, config.admins)?;
    let agents = generate_population_with(&grid, config.agents, config.seed, &config.population);
    synthesize_for(config, grid, agents)
}

/// Generates trajectories for a caller-supplied population.
pub fn synthesize_for(
    config: &SynthConfig,
    grid: CityGrid,
    agents: Vec<AgentProfile>,
) -> Result<SyntheticCorpus> {
    let histories = generate_trajectories_with(
        &grid,
        &agents,
        config.days,
        config.slots_per_day,
        config.seed,
        &config.routine,
    )?;
    let header = DatasetHeader {
        slots_per_day: config.slots_per_day,
        grid_width: config.grid_width,
        grid_height: config.grid_height,
        epoch_weekday: config.routine.epoch_weekday,
        n_days: config.days,
    };
    header.validate()?;
    let split = split_dataset(&histories)?;
    Ok(SyntheticCorpus {
        header,
        grid,
        agents,
        histories,
        split,
    })
}
