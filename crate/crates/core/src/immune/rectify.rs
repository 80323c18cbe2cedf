//! Graph rectification: remove inserted-flagged edges, restore
//! deleted-flagged edges, roll the weights back.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::graph::GraphData;
use crate::immune::{EdgeVerdict, Verdict};
use crate::model::ModelState;

/// What a rectification actually changed.
#[derive(Debug, Clone, Default)]
pub struct RectifyOutcome {
    pub removed: Vec<(usize, usize)>,
    pub added: Vec<(usize, usize)>,
    /// Epochs actually rewound (0 when no verdicts were applied).
    pub rewound: usize,
}

/// Applies the verdicts to the graph and rolls the model back `delta`
/// epochs. Contradictory or inapplicable verdicts are errors; an empty
/// verdict list leaves both graph and state untouched.
pub fn rectify(
    g: &GraphData,
    verdicts: &[EdgeVerdict],
    state: &mut ModelState,
    delta: usize,
) -> Result<(GraphData, RectifyOutcome)> {
    let mut to_remove: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut to_add: BTreeSet<(usize, usize)> = BTreeSet::new();
    for v in verdicts {
        let key = (v.edge.0.min(v.edge.1), v.edge.0.max(v.edge.1));
        match v.verdict {
            Verdict::Inserted => {
                if to_add.contains(&key) {
                    return Err(Error::Rectify(format!(
                        "edge {key:?} flagged both inserted and deleted"
                    )));
                }
                if !g.has_edge(key.0, key.1) {
                    return Err(Error::Rectify(format!(
                        "inserted verdict on absent edge {key:?}"
                    )));
                }
                to_remove.insert(key);
            }
            Verdict::Deleted => {
                if to_remove.contains(&key) {
                    return Err(Error::Rectify(format!(
                        "edge {key:?} flagged both inserted and deleted"
                    )));
                }
                if g.has_edge(key.0, key.1) {
                    return Err(Error::Rectify(format!(
                        "deleted verdict on existing edge {key:?}"
                    )));
                }
                to_add.insert(key);
            }
            Verdict::Clean => {}
        }
    }
    if to_remove.is_empty() && to_add.is_empty() {
        return Ok((g.clone(), RectifyOutcome::default()));
    }

    let mut edges: BTreeSet<(usize, usize)> = g.edges().iter().copied().collect();
    for e in &to_remove {
        edges.remove(e);
    }
    for e in &to_add {
        edges.insert(*e);
    }
    let rectified = g.with_edges(edges)?;
    let rewound = state.rollback(delta)?;
    Ok((
        rectified,
        RectifyOutcome {
            removed: to_remove.into_iter().collect(),
            added: to_add.into_iter().collect(),
            rewound,
        },
    ))
}
