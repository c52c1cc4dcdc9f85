use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;

use super::env::{TaskKind, TaskSpec};
use super::world::{Element, PageId, World, DONE};
use super::{slot_point, SynthError};
use crate::protocol::{AgentStep, ScrollDirection};
use crate::rng::{self, tag};

type Node = (PageId, usize);

fn visible(world: &World, (page, offset): Node) -> &[Element] {
    let els = &world.pages[page].elements;
    let end = (offset + world.params.viewport).min(els.len());
    &els[offset.min(end)..end]
}

fn goal_reached(world: &World, task: &TaskSpec, node: Node) -> bool {
    let v = visible(world, node);
    match &task.kind {
        TaskKind::Find { key } => v.iter().any(|e| matches!(e, Element::Info { key: k } if k == key)),
        TaskKind::Form { key, page } => {
            node.0 == *page && v.iter().any(|e| matches!(e, Element::Field { key: k } if k == key))
        }
    }
}

fn successors(world: &World, (page, offset): Node) -> Vec<(Node, AgentStep)> {
    let m = world.params.viewport;
    let len = world.pages[page].elements.len();
    let max_offset = len.saturating_sub(m);
    let mut out = Vec::new();
    for (j, e) in visible(world, (page, offset)).iter().enumerate() {
        if let Element::Link { target, .. } = e {
            out.push(((*target, 0), AgentStep::left_click("seek path", slot_point(j, m))));
        }
    }
    let down = (offset + m).min(max_offset);
    if down != offset {
        out.push(((page, down), AgentStep::scroll("scan page", ScrollDirection::Down)));
    }
    let up = offset.saturating_sub(m);
    if up != offset {
        out.push(((page, up), AgentStep::scroll("scan", ScrollDirection::Up)));
    }
    out
}

/// Shortest action sequence solving `task`: breadth-first search over
/// (page, viewport offset), then the closing TYPE/FINISHED steps.
pub fn oracle_solve(world: &World, task: &TaskSpec) -> Result<Vec<AgentStep>, SynthError> {
    let start = (world.home, 0);
    let mut prev: BTreeMap<Node, Option<(Node, AgentStep)>> = BTreeMap::from([(start, None)]);
    let mut queue = VecDeque::from([start]);
    let mut goal = None;
    while let Some(node) = queue.pop_front() {
        if goal_reached(world, task, node) {
            goal = Some(node);
            break;
        }
        for (next, step) in successors(world, node) {
            if !prev.contains_key(&next) {
                prev.insert(next, Some((node, step)));
                queue.push_back(next);
            }
        }
    }
    let goal = goal.ok_or_else(|| SynthError::Unsolvable(task.task_id.clone()))?;
    let mut steps = Vec::new();
    let mut cur = goal;
    while let Some(Some((p, step))) = prev.get(&cur) {
        steps.push(step.clone());
        cur = *p;
    }
    steps.reverse();
    let value = world
        .facts
        .get(task.key())
        .ok_or_else(|| SynthError::Unsolvable(task.task_id.clone()))?;
    match task.kind {
        TaskKind::Find { .. } => {
            steps.push(AgentStep::finished("read done", value.as_str()).expect("lexicon value"));
        }
        TaskKind::Form { .. } => {
            steps.push(AgentStep::type_text("fill form", value.as_str()).expect("lexicon value"));
            steps.push(AgentStep::finished("check done", DONE).expect("lexicon value"));
        }
    }
    Ok(steps)
}

/// Draws `n` distinct tasks whose oracle solution fits in `t_max` steps.
pub fn generate_tasks(world: &World, n: usize, seed: u64, t_max: usize) -> Result<Vec<TaskSpec>, SynthError> {
    let mut candidates = Vec::new();
    for key in world.facts.keys() {
        candidates.push(TaskSpec {
            task_id: format!("w{}-find-{key}", world.seed),
            kind: TaskKind::Find { key: key.clone() },
            query: format!("Find the {key} shown on this website."),
            world_seed: world.seed,
        });
    }
    for page in &world.pages {
        for e in &page.elements {
            if let Element::Field { key } = e {
                candidates.push(TaskSpec {
                    task_id: format!("w{}-form-{key}", world.seed),
                    kind: TaskKind::Form {
                        key: key.clone(),
                        page: page.id,
                    },
                    query: format!("Enter '{}' into the {key} field.", world.facts[key]),
                    world_seed: world.seed,
                });
            }
        }
    }
    candidates.retain(|t| oracle_solve(world, t).is_ok_and(|s| s.len() <= t_max));
    if n > candidates.len() {
        return Err(SynthError::Unsatisfiable {
            requested: n,
            available: candidates.len(),
        });
    }
    let mut rng = rng::stream(&[tag::TASKS, world.seed, seed]);
    candidates.shuffle(&mut rng);
    candidates.truncate(n);
    Ok(candidates)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::protocol::{to_env_action, ActionType};
    use crate::synthweb::env::{env_action_space, env_reset, env_step, terminal_reward, EnvConfig};
    use crate::synthweb::world::{generate_world, Page, WorldParams};

    fn replay(world: &Arc<World>, task: &TaskSpec, steps: &[AgentStep]) -> u8 {
        let (mut s, _) = env_reset(world, task, EnvConfig::default()).unwrap();
        for step in steps {
            let (ns, _, _) = env_step(s, &to_env_action(step, &env_action_space())).unwrap();
            s = ns;
        }
        terminal_reward(&s, task).unwrap()
    }

    #[test]
    fn generated_tasks_are_solvable() {
        let world = Arc::new(generate_world(7, WorldParams { pages: 6, ..WorldParams::default() }).unwrap());
        let tasks = generate_tasks(&world, 6, 3, 15).unwrap();
        assert_eq!(tasks.len(), 6);
        for t in &tasks {
            let steps = oracle_solve(&world, t).unwrap();
            assert!(steps.len() <= 15);
            assert_eq!(replay(&world, t, &steps), 1, "{}", t.task_id);
        }
        assert_eq!(tasks, generate_tasks(&world, 6, 3, 15).unwrap());
        assert!(generate_tasks(&world, 0, 3, 15).unwrap().is_empty());
        assert!(matches!(
            generate_tasks(&world, 100, 3, 15),
            Err(SynthError::Unsatisfiable { .. })
        ));
    }

    #[test]
    fn fact_on_home_viewport_is_one_step() {
        let mut facts = BTreeMap::new();
        facts.insert("price".to_string(), "amber".to_string());
        let world = World {
            seed: 5,
            params: WorldParams { pages: 2, elements_per_page: 2, viewport: 2, facts: 1, fields: 0 },
            home: 0,
            pages: vec![
                Page {
                    id: 0,
                    elements: vec![
                        Element::Info { key: "price".into() },
                        Element::Link { target: 1, info: vec![], form: vec![] },
                    ],
                },
                Page { id: 1, elements: vec![] },
            ],
            facts,
        };
        let task = TaskSpec {
            task_id: "t".into(),
            kind: TaskKind::Find { key: "price".into() },
            query: "q".into(),
            world_seed: 5,
        };
        let steps = oracle_solve(&world, &task).unwrap();
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].action_type(), ActionType::Finished);
        assert_eq!(steps[0].value(), Some("amber"));

        // Unreachable fact.
        let mut world = world;
        world.pages[0].elements = vec![Element::Submit];
        world.pages[1].elements = vec![Element::Info { key: "price".into() }];
        assert!(matches!(oracle_solve(&world, &task), Err(SynthError::Unsolvable(_))));
    }

    #[test]
    fn deep_facts_replay_to_success() {
        for seed in 0..50 {
            let world = Arc::new(generate_world(seed, WorldParams::default()).unwrap());
            for t in generate_tasks(&world, 8, seed, 15).unwrap() {
                let steps = oracle_solve(&world, &t).unwrap();
                assert_eq!(replay(&world, &t, &steps), 1);
            }
        }
    }
}
