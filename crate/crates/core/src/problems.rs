//! Built-in example problems.
//!
//! All problems are one-dimensional with two-sided or shifted jump kernels;
//! grids are chosen so that jump targets land exactly on lifted-grid nodes.

use crate::error::{CoreError, Result};
use crate::model::ProblemData;
use crate::scalar::Scalar;

/// No running cost, terminal cost 3, jumps at rate 1/2: the value function
/// is identically 3.
pub const CONSTANT_TERMINAL: &str = r#"{
  "name": "constant_terminal",
  "dimension": 1,
  "horizon": 1.0,
  "controls": [{"name": "only"}],
  "default_control": "only",
  "constants": {"Cf": 3.0, "Clam": 0.5, "Lf": 0.0, "LQ": 1.0},
  "lift": [{"kind": "terminal_value", "component": 0, "lo": -6.0, "hi": 6.0, "points": 13}],
  "drift": "0",
  "intensity": "0.5",
  "running_cost": "0",
  "terminal_cost": "3",
  "kernel": {"normalize": true, "atoms": [
    {"mark": "feat[0]+1", "weight": "0.5"},
    {"mark": "feat[0]-1", "weight": "0.5"}
  ]}
}"#;

/// Unit running cost, no terminal cost: the value function is T − s.
pub const UNIT_RUNNING: &str = r#"{
  "name": "unit_running",
  "dimension": 1,
  "horizon": 1.0,
  "controls": [{"name": "only"}],
  "default_control": "only",
  "constants": {"Cf": 1.0, "Clam": 0.5, "Lf": 0.0, "LQ": 1.0},
  "lift": [{"kind": "terminal_value", "component": 0, "lo": -6.0, "hi": 6.0, "points": 13}],
  "drift": "0",
  "intensity": "0.5",
  "running_cost": "1",
  "terminal_cost": "0",
  "kernel": {"normalize": true, "atoms": [
    {"mark": "feat[0]+1", "weight": "0.5"},
    {"mark": "feat[0]-1", "weight": "0.5"}
  ]}
}"#;

/// Two controls trading running cost against jump rate under a capped
/// quadratic displacement penalty: `calm` is expensive but suppresses jumps,
/// `cheap` is cheap but jumpy. The optimal label switches with |x|.
pub const TWO_CONTROL_MARKOV: &str = r#"{
  "name": "two_control_markov",
  "dimension": 1,
  "horizon": 1.0,
  "controls": [
    {"name": "cheap", "consts": {"run": 0.3, "rate": 1.0}},
    {"name": "calm",  "consts": {"run": 0.8, "rate": 0.2}}
  ],
  "default_control": "cheap",
  "constants": {"Cf": 4.0, "Clam": 1.0, "Lf": 4.0, "LQ": 1.0},
  "lift": [{"kind": "terminal_value", "component": 0, "lo": -4.0, "hi": 4.0, "points": 81}],
  "drift": "0",
  "intensity": "ctrl[rate]",
  "running_cost": "ctrl[run]",
  "terminal_cost": "min(feat[0]*feat[0],4)",
  "kernel": {"normalize": true, "atoms": [
    {"mark": "feat[0]+1", "weight": "0.5"},
    {"mark": "feat[0]-1", "weight": "0.5"}
  ]}
}"#;

/// Genuinely path-dependent: the terminal cost is the positive part of the
/// running supremum, controls push the drift up (free) or down (costly),
/// and every jump relocates half a unit downwards.
pub const RUNNING_MAX_PATHDEP: &str = r#"{
  "name": "running_max_pathdep",
  "dimension": 1,
  "horizon": 1.0,
  "controls": [
    {"name": "up",   "consts": {"push": 0.8,  "run": 0.0}},
    {"name": "down", "consts": {"push": -0.8, "run": 0.5}}
  ],
  "default_control": "up",
  "constants": {"Cf": 3.0, "Clam": 0.3, "Lf": 1.0, "LQ": 1.0},
  "lift": [
    {"kind": "terminal_value", "component": 0, "lo": -3.0, "hi": 3.0, "points": 25},
    {"kind": "running_max",    "component": 0, "lo": -3.0, "hi": 3.0, "points": 25}
  ],
  "drift": "ctrl[push]",
  "intensity": "0.3",
  "running_cost": "ctrl[run]",
  "terminal_cost": "min(max(feat[1],0),3)",
  "kernel": {"normalize": true, "atoms": [{"mark": "feat[0]-0.5", "weight": "1"}]}
}"#;

pub const BUILTIN_NAMES: [&str; 4] = [
    "constant_terminal",
    "unit_running",
    "two_control_markov",
    "running_max_pathdep",
];

/// Look up a built-in problem by name.
pub fn builtin<T: Scalar>(name: &str) -> Result<ProblemData<T>> {
    let text = match name {
        "constant_terminal" => CONSTANT_TERMINAL,
        "unit_running" => UNIT_RUNNING,
        "two_control_markov" => TWO_CONTROL_MARKOV,
        "running_max_pathdep" => RUNNING_MAX_PATHDEP,
        _ => {
            return Err(CoreError::Schema(format!(
                "unknown builtin `{name}`; available: {}",
                BUILTIN_NAMES.join(", ")
            )))
        }
    };
    ProblemData::from_json(text)
}

/// A 2-state/2-control/2-stage history-dependent discrete model used by the
/// `mdp` subcommand and the acceptance suite. Stage-1 kernels and costs
/// depend on the full (state, control) history.
pub const TWO_STAGE_MDP: &str = r#"{
  "states": ["lo", "hi"],
  "controls": ["stay", "move"],
  "horizon": 2,
  "kernels": [
    {"stage": 0, "states": ["lo"], "controls": ["stay"], "row": {"lo": 0.9, "hi": 0.1}},
    {"stage": 0, "states": ["lo"], "controls": ["move"], "row": {"lo": 0.2, "hi": 0.8}},
    {"stage": 0, "states": ["hi"], "controls": ["stay"], "row": {"lo": 0.1, "hi": 0.9}},
    {"stage": 0, "states": ["hi"], "controls": ["move"], "row": {"lo": 0.7, "hi": 0.3}},
    {"stage": 1, "states": ["lo", "lo"], "controls": ["stay", "stay"], "row": {"lo": 1.0}},
    {"stage": 1, "states": ["lo", "lo"], "controls": ["stay", "move"], "row": {"hi": 1.0}},
    {"stage": 1, "states": ["lo", "lo"], "controls": ["move", "stay"], "row": {"lo": 0.5, "hi": 0.5}},
    {"stage": 1, "states": ["lo", "lo"], "controls": ["move", "move"], "row": {"hi": 1.0}},
    {"stage": 1, "states": ["lo", "hi"], "controls": ["stay", "stay"], "row": {"hi": 1.0}},
    {"stage": 1, "states": ["lo", "hi"], "controls": ["stay", "move"], "row": {"lo": 0.6, "hi": 0.4}},
    {"stage": 1, "states": ["lo", "hi"], "controls": ["move", "stay"], "row": {"hi": 1.0}},
    {"stage": 1, "states": ["lo", "hi"], "controls": ["move", "move"], "row": {"lo": 0.8, "hi": 0.2}},
    {"stage": 1, "states": ["hi", "lo"], "controls": ["stay", "stay"], "row": {"lo": 1.0}},
    {"stage": 1, "states": ["hi", "lo"], "controls": ["stay", "move"], "row": {"lo": 0.3, "hi": 0.7}},
    {"stage": 1, "states": ["hi", "lo"], "controls": ["move", "stay"], "row": {"lo": 0.9, "hi": 0.1}},
    {"stage": 1, "states": ["hi", "lo"], "controls": ["move", "move"], "row": {"hi": 1.0}},
    {"stage": 1, "states": ["hi", "hi"], "controls": ["stay", "stay"], "row": {"hi": 1.0}},
    {"stage": 1, "states": ["hi", "hi"], "controls": ["stay", "move"], "row": {"lo": 0.5, "hi": 0.5}},
    {"stage": 1, "states": ["hi", "hi"], "controls": ["move", "stay"], "row": {"lo": 0.4, "hi": 0.6}},
    {"stage": 1, "states": ["hi", "hi"], "controls": ["move", "move"], "row": {"lo": 1.0}}
  ],
  "costs": [
    {"stage": 0, "states": ["lo"], "controls": ["stay"], "value": 1.0},
    {"stage": 0, "states": ["lo"], "controls": ["move"], "value": 2.0},
    {"stage": 0, "states": ["hi"], "controls": ["stay"], "value": 0.5},
    {"stage": 0, "states": ["hi"], "controls": ["move"], "value": 1.5},
    {"stage": 1, "states": ["lo", "lo"], "controls": ["stay", "stay"], "value": 1.0},
    {"stage": 1, "states": ["lo", "lo"], "controls": ["stay", "move"], "value": 0.25},
    {"stage": 1, "states": ["lo", "lo"], "controls": ["move", "stay"], "value": 0.5},
    {"stage": 1, "states": ["lo", "lo"], "controls": ["move", "move"], "value": 2.5},
    {"stage": 1, "states": ["lo", "hi"], "controls": ["stay", "stay"], "value": 0.75},
    {"stage": 1, "states": ["lo", "hi"], "controls": ["stay", "move"], "value": 1.25},
    {"stage": 1, "states": ["lo", "hi"], "controls": ["move", "stay"], "value": 0.0},
    {"stage": 1, "states": ["lo", "hi"], "controls": ["move", "move"], "value": 3.0},
    {"stage": 1, "states": ["hi", "lo"], "controls": ["stay", "stay"], "value": 2.0},
    {"stage": 1, "states": ["hi", "lo"], "controls": ["stay", "move"], "value": 0.5},
    {"stage": 1, "states": ["hi", "lo"], "controls": ["move", "stay"], "value": 1.0},
    {"stage": 1, "states": ["hi", "lo"], "controls": ["move", "move"], "value": 0.25},
    {"stage": 1, "states": ["hi", "hi"], "controls": ["stay", "stay"], "value": 0.5},
    {"stage": 1, "states": ["hi", "hi"], "controls": ["stay", "move"], "value": 1.75},
    {"stage": 1, "states": ["hi", "hi"], "controls": ["move", "stay"], "value": 2.25},
    {"stage": 1, "states": ["hi", "hi"], "controls": ["move", "move"], "value": 0.75}
  ]
}"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_builtins_parse_and_validate() {
        for name in BUILTIN_NAMES {
            let m: ProblemData<f64> = builtin(name).unwrap();
            let report = m.validate_assumptions(150, 1);
            assert!(
                report.pass,
                "{name}: {:?}",
                report.checks.iter().filter(|c| !c.pass).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn unknown_builtin_is_an_error() {
        assert!(builtin::<f64>("nope").is_err());
    }
}
