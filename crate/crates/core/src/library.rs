//! Built-in scenarios compiled into the crate.

use crate::error::{config, Result};
use crate::world::Scenario;

const SOURCES: [(&str, &str); 9] = [
    ("poc", include_str!("../scenarios/poc.json")),
    ("env1", include_str!("../scenarios/env1.json")),
    ("env2", include_str!("../scenarios/env2.json")),
    ("env3", include_str!("../scenarios/env3.json")),
    ("circular8", include_str!("../scenarios/circular8.json")),
    ("circular12", include_str!("../scenarios/circular12.json")),
    ("circular16", include_str!("../scenarios/circular16.json")),
    (
        "random_case1",
        include_str!("../scenarios/random_case1.json"),
    ),
    (
        "random_case2",
        include_str!("../scenarios/random_case2.json"),
    ),
];

pub fn ids() -> impl Iterator<Item = &'static str> {
    SOURCES.iter().map(|(id, _)| *id)
}

pub fn source(id: &str) -> Option<&'static str> {
    SOURCES.iter().find(|(k, _)| *k == id).map(|(_, s)| *s)
}

pub fn builtin(id: &str) -> Result<Scenario> {
    let text = source(id).ok_or_else(|| {
        config(format!(
            "unknown scenario '{id}'; built-ins: {}",
            ids().collect::<Vec<_>>().join(", ")
        ))
    })?;
    Scenario::from_json(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn every_builtin_validates_and_round_trips() {
        for id in ids() {
            let sc = builtin(id).unwrap_or_else(|e| panic!("{id}: {e}"));
            assert_eq!(sc.id, id);
            let again = Scenario::from_json(&sc.to_json()).unwrap();
            assert_eq!(again, sc);
            let original: serde_json::Value = serde_json::from_str(source(id).unwrap()).unwrap();
            let reserialized: serde_json::Value = serde_json::from_str(&again.to_json()).unwrap();
            // Defaults are materialized on output; every original key survives unchanged.
            for (k, v) in original.as_object().unwrap() {
                assert_eq!(numeric(&reserialized[k]), numeric(v), "{id}.{k}");
            }
            let mut rng = seeded(1);
            for _ in 0..20 {
                let task = sc.sample_task(&mut rng).unwrap();
                sc.validate_task(&task).unwrap();
                sc.validate_layout(&sc.random_layout(&mut rng)).unwrap();
            }
        }
    }

    /// Integers and floats compare by value.
    fn numeric(v: &serde_json::Value) -> serde_json::Value {
        use serde_json::Value;
        match v {
            Value::Number(n) => serde_json::json!(n.as_f64().unwrap()),
            Value::Array(a) => Value::Array(a.iter().map(numeric).collect()),
            Value::Object(o) => {
                Value::Object(o.iter().map(|(k, v)| (k.clone(), numeric(v))).collect())
            }
            other => other.clone(),
        }
    }

    #[test]
    fn shipped_dimensions() {
        let poc = builtin("poc").unwrap();
        assert_eq!(
            (
                poc.arena.xmax - poc.arena.xmin,
                poc.arena.ymax - poc.arena.ymin
            ),
            (10.0, 12.0)
        );
        assert_eq!((poc.n_agents(), poc.obstacle_templates.len()), (4, 4));
        assert_eq!(builtin("env2").unwrap().obstacle_templates.len(), 8);
        assert_eq!(builtin("env3").unwrap().obstacle_templates.len(), 16);
        for n in [8, 12, 16] {
            assert_eq!(builtin(&format!("circular{n}")).unwrap().n_agents(), n);
        }
        let r = builtin("random_case2").unwrap();
        assert_eq!(
            (
                r.arena.xmax - r.arena.xmin,
                r.n_agents(),
                r.obstacle_templates.len()
            ),
            (18.0, 16, 4)
        );
        assert!(builtin("nope").is_err());
    }

    #[test]
    fn swap_sampler_reverses_the_requested_count() {
        let sc = builtin("random_case1").unwrap();
        let task = sc.sample_task(&mut seeded(4)).unwrap();
        let base = sc.task();
        let reversed = (0..16)
            .filter(|&i| task.starts[i] == base.goals[i] && task.goals[i] == base.starts[i])
            .count();
        assert_eq!(reversed, 8);
    }
}
