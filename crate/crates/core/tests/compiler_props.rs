use std::collections::{BTreeMap, BTreeSet};

use bcer_core::compiler::{compile, toposort, CompileErrorKind, Edge};
use bcer_core::contract::{shipped_contract, shipped_contracts};
use bcer_core::sim_tools::{library_registry, TaskId};
use bcer_core::sketch::{plan_for_case, sketch_from_plan, PlannerPolicy, SketchArg, UNFILLED};
use bcer_core::token::TokenKind;
use bcer_core::value::ArgValue;
use proptest::prelude::*;

fn edge(p: usize, c: usize) -> Edge {
    Edge {
        producer: format!("n{p}"),
        consumer: format!("n{c}"),
        arg: "x".into(),
    }
}

/// Random DAG over `n` nodes: edges only go from lower to higher rank, then
/// node names are listed in a shuffled "sketch" order.
fn dag() -> impl Strategy<Value = (Vec<String>, BTreeSet<Edge>)> {
    (1usize..25)
        .prop_flat_map(|n| {
            (
                Just(n),
                prop::collection::vec(any::<bool>(), n * n),
                Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
            )
        })
        .prop_map(|(n, bits, order)| {
            let mut edges = BTreeSet::new();
            for i in 0..n {
                for j in i + 1..n {
                    if bits[i * n + j] && (i + j) % 3 == 0 {
                        edges.insert(edge(i, j));
                    }
                }
            }
            (order.iter().map(|k| format!("n{k}")).collect(), edges)
        })
}

/// Reference ordering: repeatedly take the earliest-listed node whose
/// producers are all placed.
fn oracle_order(nodes: &[String], edges: &BTreeSet<Edge>) -> Vec<String> {
    let mut placed: Vec<String> = Vec::new();
    while placed.len() < nodes.len() {
        let next = nodes
            .iter()
            .find(|n| {
                !placed.contains(n)
                    && edges.iter().filter(|e| &e.consumer == *n).all(|e| placed.contains(&e.producer))
            })
            .expect("acyclic");
        placed.push(next.clone());
    }
    placed
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn toposort_respects_every_edge((nodes, edges) in dag()) {
        let order = toposort(&nodes, &edges).unwrap();
        let pos: BTreeMap<&String, usize> = order.iter().enumerate().map(|(i, n)| (n, i)).collect();
        prop_assert_eq!(pos.len(), nodes.len());
        for e in &edges {
            prop_assert!(pos[&e.producer] < pos[&e.consumer]);
        }
        prop_assert_eq!(order, oracle_order(&nodes, &edges));
    }

    #[test]
    fn back_edge_yields_witness_cycle((nodes, mut edges) in dag(), pick in any::<prop::sample::Index>()) {
        prop_assume!(!edges.is_empty());
        let e = pick.get(&edges.iter().cloned().collect::<Vec<_>>()).clone();
        edges.insert(Edge { producer: e.consumer.clone(), consumer: e.producer.clone(), arg: "back".into() });
        let cycle = toposort(&nodes, &edges).unwrap_err();
        prop_assert!(cycle.len() >= 3);
        prop_assert_eq!(cycle.first(), cycle.last());
        for w in cycle.windows(2) {
            prop_assert!(edges.iter().any(|e| e.producer == w[0] && e.consumer == w[1]));
        }
    }

    #[test]
    fn compile_is_deterministic_and_conservative(task_idx in 0usize..8, seed in any::<u64>()) {
        let reg = library_registry();
        let contract = shipped_contract(TaskId::ALL[task_idx]);
        let sketch = sketch_from_plan(&plan_for_case(&contract, &PlannerPolicy::default_faults(), seed), &reg);
        let first = compile(&sketch, &reg, &contract);
        let second = compile(&sketch, &reg, &contract);
        prop_assert_eq!(&first, &second);
        if let Ok(g) = first {
            let steps: BTreeSet<&str> = sketch.steps.iter().map(|s| s.id.as_str()).collect();
            let nodes: BTreeSet<&str> = g.nodes.keys().map(String::as_str).collect();
            prop_assert_eq!(steps, nodes);
            let pos: BTreeMap<&String, usize> = g.execution_order.iter().enumerate().map(|(i, n)| (n, i)).collect();
            for e in &g.edges {
                prop_assert!(pos[&e.producer] < pos[&e.consumer]);
            }
            for n in g.nodes.values() {
                for v in n.args.values() {
                    prop_assert_ne!(v, &ArgValue::Literal(bcer_core::value::Literal::Text(UNFILLED.into())));
                }
                for (_, t) in n.node_refs() {
                    prop_assert!(g.nodes.contains_key(t.node_id.as_deref().unwrap()));
                }
            }
        }
    }
}

/// For every reference argument in every task, a unique producer is linked
/// and a duplicated producer is refused.
#[test]
fn inference_links_unique_producers_and_refuses_duplicates() {
    let reg = library_registry();
    let mut checked = 0;
    for contract in shipped_contracts() {
        let faithful = sketch_from_plan(&plan_for_case(&contract, &PlannerPolicy::none(), 0), &reg);
        for (k, step) in faithful.steps.iter().enumerate() {
            for (arg, value) in &step.args {
                let SketchArg::Value(ArgValue::Token(t)) = value else { continue };
                if t.kind != TokenKind::Node {
                    continue;
                }
                let producer = t.node_id.clone().unwrap();
                let p_idx = faithful.steps.iter().position(|s| s.id == producer).unwrap();
                let ty = reg.lookup(&step.tool).unwrap().args[arg].semantic_type;
                let same_type = faithful.steps[..k]
                    .iter()
                    .flat_map(|s| reg.lookup(&s.tool).unwrap().outputs.values())
                    .filter(|o| **o == ty)
                    .count();

                let mut unfilled = faithful.clone();
                unfilled.steps[k].args.insert(arg.clone(), SketchArg::Unfilled);
                if same_type == 1 {
                    let g = compile(&unfilled, &reg, &contract).unwrap();
                    assert_eq!(g.nodes[&step.id].args[arg], ArgValue::Token(t.clone()));
                }

                let mut dup = unfilled.clone();
                let mut copy = faithful.steps[p_idx].clone();
                copy.id = format!("{producer}_dup");
                dup.steps.insert(p_idx + 1, copy);
                let errs = compile(&dup, &reg, &contract).expect_err("ambiguous producer must not compile");
                assert!(
                    errs.iter().any(|e| e.kind == CompileErrorKind::AmbiguousLink
                        && e.step.as_deref() == Some(step.id.as_str())
                        && e.arg.as_deref() == Some(arg.as_str())),
                    "{}: {errs:?}",
                    contract.task
                );
                checked += 1;
            }
        }
    }
    assert!(checked >= 20, "only {checked} reference arguments exercised");
}
