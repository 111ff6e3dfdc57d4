//! Token-tree drafting with greedy verification.
//!
//! The tree is a full `width`-ary expansion to depth `gamma`: the children of
//! every path are the top-`width` tokens of the drafting distribution at that
//! path. Verification walks the target's greedy chain down the tree.

use crate::dist::{top_d, weighted_average, Distribution, WeightVector};
use crate::error::{Error, Result};
use crate::models::{Context, DraftSource, SequenceModel, TokenId};
use crate::tabed::HistoryCache;

/// Drafting distributions at one tree path.
#[derive(Clone, Debug, PartialEq)]
pub struct Expansion {
    pub ensembled: Distribution,
    pub per_source: Vec<Distribution>,
}

/// Expansion for a fixed-weight mixture of sources (one source with weight `[1]` is plain drafting).
pub fn mixture_expansion(sources: &[DraftSource], w: &WeightVector, ctx: &Context) -> Result<Expansion> {
    let per_source: Vec<Distribution> = sources.iter().map(|s| s.next_distribution(ctx)).collect();
    let ensembled = weighted_average(&per_source, w)?;
    Ok(Expansion {
        ensembled,
        per_source,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    pub token: TokenId,
    /// 1-based; root children sit at depth 1.
    pub depth: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Distributions conditioned on the path ending at this node; `None` at full depth.
    pub expansion: Option<Expansion>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenTree {
    pub width: usize,
    pub depth: usize,
    /// Distributions conditioned on the bare root context.
    pub root_expansion: Expansion,
    pub root_children: Vec<usize>,
    pub nodes: Vec<TreeNode>,
}

impl TokenTree {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Tokens from the root down to `node`, inclusive.
    pub fn path_to(&self, node: usize) -> Vec<TokenId> {
        let mut path = Vec::with_capacity(self.nodes[node].depth);
        let mut cur = Some(node);
        while let Some(i) = cur {
            path.push(self.nodes[i].token);
            cur = self.nodes[i].parent;
        }
        path.reverse();
        path
    }

    fn children_of(&self, node: Option<usize>) -> &[usize] {
        match node {
            None => &self.root_children,
            Some(i) => &self.nodes[i].children,
        }
    }

    fn expansion_of(&self, node: Option<usize>) -> Option<&Expansion> {
        match node {
            None => Some(&self.root_expansion),
            Some(i) => self.nodes[i].expansion.as_ref(),
        }
    }

    /// Every root-to-leaf token sequence, in node order.
    pub fn leaf_paths(&self) -> Vec<Vec<TokenId>> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].children.is_empty())
            .map(|i| self.path_to(i))
            .collect()
    }
}

/// Breadth-first full expansion. `expand` maps a context to the drafting
/// distributions used to pick that path's children.
pub fn build_tree<F>(ctx: &Context, width: usize, gamma: usize, mut expand: F) -> Result<TokenTree>
where
    F: FnMut(&Context) -> Result<Expansion>,
{
    if gamma == 0 {
        return Err(Error::BadParams("gamma must be >= 1".into()));
    }
    let root_expansion = expand(ctx)?;
    let vocab = root_expansion.ensembled.vocab_size();
    if width == 0 || width > vocab {
        return Err(Error::WidthOutOfRange {
            width,
            vocab_size: vocab,
        });
    }
    let mut tree = TokenTree {
        width,
        depth: gamma,
        root_expansion,
        root_children: Vec::new(),
        nodes: Vec::new(),
    };
    // (parent, its path) pairs awaiting child creation, one depth level at a time
    let mut frontier: Vec<(Option<usize>, Vec<TokenId>)> = vec![(None, Vec::new())];
    for depth in 1..=gamma {
        let mut next = Vec::with_capacity(frontier.len() * width);
        for (parent, path) in frontier {
            let picks = top_d(&tree.expansion_of(parent).expect("frontier nodes are expanded").ensembled, width)?;
            for token in picks {
                let mut child_path = path.clone();
                child_path.push(token);
                let expansion = if depth < gamma {
                    Some(expand(&ctx.extended(&child_path))?)
                } else {
                    None
                };
                let idx = tree.nodes.len();
                tree.nodes.push(TreeNode {
                    token,
                    depth,
                    parent,
                    children: Vec::new(),
                    expansion,
                });
                match parent {
                    None => tree.root_children.push(idx),
                    Some(p) => tree.nodes[p].children.push(idx),
                }
                if depth < gamma {
                    next.push((Some(idx), child_path));
                }
            }
        }
        frontier = next;
    }
    Ok(tree)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeVerifyResult {
    pub accepted_path: Vec<TokenId>,
    pub accepted_count: usize,
    /// First-miss correction, or the bonus token after a full-depth match.
    pub extra_token: TokenId,
    /// Node indices along the accepted path.
    pub accepted_nodes: Vec<usize>,
    /// Target distributions along the realized path, `accepted_count + 1` of them.
    pub target_dists: Vec<Distribution>,
}

impl TreeVerifyResult {
    pub fn emitted_tokens(&self) -> Vec<TokenId> {
        let mut out = self.accepted_path.clone();
        out.push(self.extra_token);
        out
    }
}

/// Walks the target's greedy chain through the tree.
pub fn verify_tree_greedy(target: &dyn SequenceModel, ctx: &Context, tree: &TokenTree) -> TreeVerifyResult {
    let mut work = ctx.clone();
    let mut current: Option<usize> = None;
    let mut accepted_path = Vec::new();
    let mut accepted_nodes = Vec::new();
    let mut target_dists = Vec::new();
    loop {
        let p = target.next_distribution(&work);
        let best = p.argmax();
        target_dists.push(p);
        let hit = tree
            .children_of(current)
            .iter()
            .copied()
            .find(|&c| tree.nodes[c].token == best);
        match hit {
            Some(child) => {
                accepted_path.push(best);
                accepted_nodes.push(child);
                work.push(best);
                current = Some(child);
            }
            None => {
                return TreeVerifyResult {
                    accepted_count: accepted_path.len(),
                    accepted_path,
                    extra_token: best,
                    accepted_nodes,
                    target_dists,
                };
            }
        }
    }
}

/// Records the realized path of a verified tree into the history.
pub fn update_history_tree(cache: &mut HistoryCache, tree: &TokenTree, vr: &TreeVerifyResult) -> Result<()> {
    if vr.accepted_count != vr.accepted_path.len()
        || vr.accepted_nodes.len() != vr.accepted_count
        || vr.target_dists.len() != vr.accepted_count + 1
        || vr.accepted_count > tree.depth
    {
        return Err(Error::InconsistentPair("tree verification result is malformed".into()));
    }
    let emitted = vr.emitted_tokens();
    let recorded = (vr.accepted_count + 1).min(tree.depth);
    for (i, &token) in emitted.iter().enumerate().take(recorded) {
        let at = if i == 0 { None } else { Some(vr.accepted_nodes[i - 1]) };
        let exp = tree
            .expansion_of(at)
            .ok_or_else(|| Error::InconsistentPair("accepted node lacks an expansion".into()))?;
        cache.record(i, vr.target_dists[i].clone(), exp.per_source.clone(), token)?;
    }
    cache.advance(emitted.len());
    Ok(())
}
