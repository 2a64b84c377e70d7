//! Three-level class hierarchy (super class, object class, sub class) and the
//! additive negative-log scoring of a root-to-leaf chain.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{fit, DetectorModel, Example, FitOptions};
use crate::error::{Error, Result};
use crate::optim::{bcd_minimize, BcdConfig, BcdOutcome, BlockProblem, OptimizerConfig};

pub type NodeId = usize;

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseTag {
    Existing,
    Combined,
    New,
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassNode {
    pub id: NodeId,
    pub name: String,
    pub parent: Option<NodeId>,
    pub level: u8,
    pub case: CaseTag,
    pub children: Vec<NodeId>,
}

/// Rooted tree; node 0 is the root, levels 1..=3 hold super, object and sub
/// classes. A node's class index in its parent's model is its position in the
/// parent's `children` list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTree {
    nodes: Vec<ClassNode>,
}

impl Default for ClassTree {
    fn default() -> Self {
        Self::new()
    }
}

impl ClassTree {
    pub const ROOT: NodeId = 0;

    pub fn new() -> Self {
        ClassTree {
            nodes: vec![ClassNode {
                id: 0,
                name: "root".into(),
                parent: None,
                level: 0,
                case: CaseTag::None,
                children: Vec::new(),
            }],
        }
    }

    pub fn add(&mut self, parent: NodeId, name: impl Into<String>) -> Result<NodeId> {
        let level = self
            .nodes
            .get(parent)
            .ok_or_else(|| Error::InvalidPath(format!("unknown parent node {parent}")))?
            .level
            + 1;
        if level > 3 {
            return Err(Error::InvalidPath(format!("node under {parent} would sit below level 3")));
        }
        let id = self.nodes.len();
        self.nodes.push(ClassNode {
            id,
            name: name.into(),
            parent: Some(parent),
            level,
            case: CaseTag::None,
            children: Vec::new(),
        });
        self.nodes[parent].children.push(id);
        Ok(id)
    }

    pub fn node(&self, id: NodeId) -> Result<&ClassNode> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::InvalidPath(format!("unknown node {id}")))
    }

    pub fn nodes(&self) -> &[ClassNode] {
        &self.nodes
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id].children
    }

    pub fn supers(&self) -> &[NodeId] {
        self.children(Self::ROOT)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    /// Every leaf must sit exactly at level 3.
    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Empty("class tree"));
        }
        for n in &self.nodes {
            if n.children.is_empty() && n.level != 3 {
                return Err(Error::InvalidPath(format!(
                    "leaf `{}` is at level {}, expected 3",
                    n.name, n.level
                )));
            }
            if n.level < 2 && n.case != CaseTag::None {
                return Err(Error::InvalidPath(format!("case tag on level-{} node `{}`", n.level, n.name)));
            }
        }
        Ok(())
    }

    pub fn set_case(&mut self, id: NodeId, case: CaseTag) -> Result<()> {
        let node = self.node(id)?;
        if node.level < 2 && case != CaseTag::None {
            return Err(Error::invalid("case tags only apply to object and sub classes"));
        }
        self.nodes[id].case = case;
        Ok(())
    }

    fn child_index(&self, parent: NodeId, child: NodeId) -> Result<usize> {
        self.children(parent)
            .iter()
            .position(|&c| c == child)
            .ok_or_else(|| Error::InvalidPath(format!("node {child} is not a child of {parent}")))
    }

    /// All root-to-leaf chains in child order.
    pub fn paths(&self) -> Vec<ClassPath> {
        let mut out = Vec::new();
        for &s in self.supers() {
            for &o in self.children(s) {
                for &u in self.children(o) {
                    out.push(ClassPath { sup: s, obj: o, sub: u });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPath {
    pub sup: NodeId,
    pub obj: NodeId,
    pub sub: NodeId,
}

/// Per-level models: one super-class model, one object model per super class,
/// and `R` part models per object class. A node with a single child needs no
/// model (its child has probability one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelModels {
    pub sup: Option<DetectorModel>,
    pub obj: BTreeMap<NodeId, DetectorModel>,
    pub sub: BTreeMap<NodeId, Vec<DetectorModel>>,
}

impl LevelModels {
    /// Untrained (uniform) models for every branching node, `parts` part
    /// models per object class.
    pub fn uniform(tree: &ClassTree, dim: usize, parts: usize) -> Result<Self> {
        tree.validate()?;
        if parts == 0 {
            return Err(Error::invalid("at least one sub-class part model is required"));
        }
        let make = |n: usize| -> Result<Option<DetectorModel>> {
            if n >= 2 {
                Ok(Some(DetectorModel::new(n, dim)?))
            } else {
                Ok(None)
            }
        };
        let sup = make(tree.supers().len())?;
        let mut obj = BTreeMap::new();
        let mut sub = BTreeMap::new();
        for &s in tree.supers() {
            if let Some(m) = make(tree.children(s).len())? {
                obj.insert(s, m);
            }
            for &o in tree.children(s) {
                let n = tree.children(o).len();
                if n >= 2 {
                    sub.insert(o, (0..parts).map(|_| DetectorModel::new(n, dim)).collect::<Result<_>>()?);
                }
            }
        }
        Ok(LevelModels { sup, obj, sub })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalScore {
    pub sup_term: f64,
    pub obj_term: f64,
    pub sub_terms: Vec<f64>,
    pub total: f64,
}

fn neg_log(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

fn level_term(model: Option<&DetectorModel>, n_children: usize, index: usize, x: &[f64]) -> Result<f64> {
    match (model, n_children) {
        (_, 1) => Ok(0.0),
        (Some(m), n) if m.num_classes() == n => Ok(neg_log(m.class_probs(x)?[index])),
        (Some(m), n) => Err(Error::invalid(format!(
            "level model has {} classes but node has {n} children",
            m.num_classes()
        ))),
        (None, _) => Err(Error::invalid("missing level model for a branching node")),
    }
}

fn sub_terms(models: Option<&Vec<DetectorModel>>, n_children: usize, index: usize, x: &[f64]) -> Result<Vec<f64>> {
    if n_children == 1 {
        return Ok(vec![0.0]);
    }
    let parts = models.ok_or_else(|| Error::invalid("missing sub-class part models"))?;
    parts.iter().map(|m| level_term(Some(m), n_children, index, x)).collect()
}

/// Negative-log score of one root-to-leaf chain.
pub fn hierarchical_score(
    tree: &ClassTree,
    models: &LevelModels,
    x: &[f64],
    path: ClassPath,
) -> Result<HierarchicalScore> {
    let si = tree.child_index(ClassTree::ROOT, path.sup)?;
    let oi = tree.child_index(path.sup, path.obj)?;
    let ui = tree.child_index(path.obj, path.sub)?;
    let sup_term = level_term(models.sup.as_ref(), tree.supers().len(), si, x)?;
    let obj_term = level_term(models.obj.get(&path.sup), tree.children(path.sup).len(), oi, x)?;
    let sub_terms = sub_terms(models.sub.get(&path.obj), tree.children(path.obj).len(), ui, x)?;
    let total = sup_term + obj_term + sub_terms.iter().sum::<f64>();
    Ok(HierarchicalScore {
        sup_term,
        obj_term,
        sub_terms,
        total,
    })
}

/// Strategy for choosing a chain through the tree.
pub trait PathSearch: Send + Sync {
    fn name(&self) -> &'static str;
    fn search(&self, tree: &ClassTree, models: &LevelModels, x: &[f64]) -> Result<(ClassPath, HierarchicalScore)>;
}

/// Level-by-level arg-min (beam width one).
#[derive(Debug, Default, Clone, Copy)]
pub struct GreedySearch;

impl PathSearch for GreedySearch {
    fn name(&self) -> &'static str {
        "greedy"
    }

    fn search(&self, tree: &ClassTree, models: &LevelModels, x: &[f64]) -> Result<(ClassPath, HierarchicalScore)> {
        tree.validate()?;
        let pick = |parent: NodeId, term: &dyn Fn(usize) -> Result<f64>| -> Result<NodeId> {
            let children = tree.children(parent);
            let mut best = (children[0], term(0)?);
            for (i, &c) in children.iter().enumerate().skip(1) {
                let t = term(i)?;
                if t < best.1 {
                    best = (c, t);
                }
            }
            Ok(best.0)
        };
        let n_sup = tree.supers().len();
        let sup = pick(ClassTree::ROOT, &|i| level_term(models.sup.as_ref(), n_sup, i, x))?;
        let n_obj = tree.children(sup).len();
        let obj = pick(sup, &|i| level_term(models.obj.get(&sup), n_obj, i, x))?;
        let n_sub = tree.children(obj).len();
        let sub = pick(obj, &|i| Ok(sub_terms(models.sub.get(&obj), n_sub, i, x)?.iter().sum()))?;
        let path = ClassPath { sup, obj, sub };
        Ok((path, hierarchical_score(tree, models, x, path)?))
    }
}

/// Exhaustive minimization of the total over every chain.
#[derive(Debug, Default, Clone, Copy)]
pub struct ExactSearch;

impl PathSearch for ExactSearch {
    fn name(&self) -> &'static str {
        "exact"
    }

    fn search(&self, tree: &ClassTree, models: &LevelModels, x: &[f64]) -> Result<(ClassPath, HierarchicalScore)> {
        tree.validate()?;
        let mut best: Option<(ClassPath, HierarchicalScore)> = None;
        for path in tree.paths() {
            let score = hierarchical_score(tree, models, x, path)?;
            if best.as_ref().is_none_or(|(_, b)| score.total < b.total) {
                best = Some((path, score));
            }
        }
        best.ok_or(Error::Empty("class tree"))
    }
}

pub struct PathSearchRegistry {
    entries: BTreeMap<&'static str, Box<dyn PathSearch>>,
}

impl Default for PathSearchRegistry {
    fn default() -> Self {
        let mut r = PathSearchRegistry {
            entries: BTreeMap::new(),
        };
        r.register(Box::new(GreedySearch));
        r.register(Box::new(ExactSearch));
        r
    }
}

impl PathSearchRegistry {
    pub fn register(&mut self, search: Box<dyn PathSearch>) {
        self.entries.insert(search.name(), search);
    }

    pub fn get(&self, name: &str) -> Result<&dyn PathSearch> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "path search",
                name: name.to_string(),
            })
    }
}

/// Predicts a chain with the named search strategy (`greedy` or `exact`).
pub fn predict_path(
    tree: &ClassTree,
    models: &LevelModels,
    x: &[f64],
    strategy: &str,
) -> Result<(ClassPath, HierarchicalScore)> {
    PathSearchRegistry::default().get(strategy)?.search(tree, models, x)
}

/// Tags an object or sub class by how strongly it matches existing classes.
pub fn assign_case(tree: &ClassTree, node: NodeId, max_likelihood: f64, tau_exist: f64, tau_new: f64) -> Result<CaseTag> {
    if !(tau_new < tau_exist) {
        return Err(Error::invalid(format!(
            "thresholds out of order: tau_new {tau_new} must be below tau_exist {tau_exist}"
        )));
    }
    if !(0.0..=1.0).contains(&max_likelihood) {
        return Err(Error::invalid(format!("likelihood {max_likelihood} outside [0, 1]")));
    }
    let level = tree.node(node)?.level;
    if !(2..=3).contains(&level) {
        return Err(Error::invalid(format!("case tags apply to levels 2 and 3, node {node} is level {level}")));
    }
    Ok(if max_likelihood >= tau_exist {
        CaseTag::Existing
    } else if max_likelihood >= tau_new {
        CaseTag::Combined
    } else {
        CaseTag::New
    })
}

/// Level-parameter blocks for coordinate descent: super, object, sub.
struct HierarchyProblem<'a> {
    tree: &'a ClassTree,
    template: &'a LevelModels,
    data: &'a [(Vec<f64>, ClassPath)],
    opt: &'a OptimizerConfig,
    epochs: usize,
}

impl HierarchyProblem<'_> {
    fn pack(models: &LevelModels) -> Vec<Vec<f64>> {
        let sup = models.sup.as_ref().map(|m| m.params().to_vec()).unwrap_or_default();
        let obj = models.obj.values().flat_map(|m| m.params().to_vec()).collect();
        let sub = models
            .sub
            .values()
            .flat_map(|parts| parts.iter().flat_map(|m| m.params().to_vec()))
            .collect();
        vec![sup, obj, sub]
    }

    fn unpack(&self, blocks: &[Vec<f64>]) -> LevelModels {
        let mut out = self.template.clone();
        if let Some(m) = out.sup.as_mut() {
            m.params_mut().copy_from_slice(&blocks[0]);
        }
        let mut off = 0;
        for m in out.obj.values_mut() {
            let n = m.params().len();
            m.params_mut().copy_from_slice(&blocks[1][off..off + n]);
            off += n;
        }
        off = 0;
        for parts in out.sub.values_mut() {
            for m in parts {
                let n = m.params().len();
                m.params_mut().copy_from_slice(&blocks[2][off..off + n]);
                off += n;
            }
        }
        out
    }

    fn block_objective(&self, blocks: &[Vec<f64>], index: usize, ridge: f64) -> f64 {
        self.objective(blocks) + ridge * blocks[index].iter().map(|v| v * v).sum::<f64>()
    }

    fn train_level(&self, model: &DetectorModel, examples: &[Example<'_>], ridge: f64) -> DetectorModel {
        if examples.is_empty() {
            return model.clone();
        }
        let opt = OptimizerConfig {
            loc_weight: 0.0,
            ..self.opt.clone()
        };
        let options = FitOptions { ridge, trace: false };
        fit(model, examples, &opt, self.epochs, options)
            .map(|o| o.model)
            .unwrap_or_else(|_| model.clone())
    }

    fn examples_where(&self, select: impl Fn(&ClassPath) -> Option<usize>) -> Vec<Example<'_>> {
        self.data
            .iter()
            .filter_map(|(x, p)| {
                select(p).map(|class| Example {
                    features: x,
                    class,
                    target: [0.0; 4],
                })
            })
            .collect()
    }
}

impl BlockProblem for HierarchyProblem<'_> {
    fn objective(&self, blocks: &[Vec<f64>]) -> f64 {
        let models = self.unpack(blocks);
        let total: f64 = self
            .data
            .iter()
            .map(|(x, p)| {
                hierarchical_score(self.tree, &models, x, *p)
                    .map(|s| s.total)
                    .unwrap_or(f64::INFINITY)
            })
            .sum();
        total / self.data.len().max(1) as f64
    }

    fn minimize_block(&self, index: usize, blocks: &[Vec<f64>], ridge: f64) -> Vec<f64> {
        let mut models = self.unpack(blocks);
        let tree = self.tree;
        match index {
            0 => {
                if let Some(m) = models.sup.as_ref() {
                    let ex = self.examples_where(|p| tree.child_index(ClassTree::ROOT, p.sup).ok());
                    models.sup = Some(self.train_level(m, &ex, ridge));
                }
            }
            1 => {
                let keys: Vec<NodeId> = models.obj.keys().copied().collect();
                for s in keys {
                    let ex = self.examples_where(|p| (p.sup == s).then(|| tree.child_index(s, p.obj).ok()).flatten());
                    let trained = self.train_level(&models.obj[&s], &ex, ridge);
                    models.obj.insert(s, trained);
                }
            }
            _ => {
                let keys: Vec<NodeId> = models.sub.keys().copied().collect();
                for o in keys {
                    let ex = self.examples_where(|p| (p.obj == o).then(|| tree.child_index(o, p.sub).ok()).flatten());
                    let parts = models.sub[&o].iter().map(|m| self.train_level(m, &ex, ridge)).collect();
                    models.sub.insert(o, parts);
                }
            }
        }
        let proposal = Self::pack(&models).swap_remove(index);
        let mut candidate = blocks.to_vec();
        candidate[index] = proposal;
        if self.block_objective(&candidate, index, ridge) <= self.block_objective(blocks, index, ridge) {
            candidate.swap_remove(index)
        } else {
            blocks[index].clone()
        }
    }
}

/// Fits every level model by cycling super, object and sub blocks.
pub fn train_hierarchy(
    tree: &ClassTree,
    init: &LevelModels,
    data: &[(Vec<f64>, ClassPath)],
    opt: &OptimizerConfig,
    epochs_per_block: usize,
    bcd: &BcdConfig,
) -> Result<(LevelModels, BcdOutcome)> {
    tree.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("hierarchy training set"));
    }
    for (x, p) in data {
        hierarchical_score(tree, init, x, *p)?;
    }
    let problem = HierarchyProblem {
        tree,
        template: init,
        data,
        opt,
        epochs: epochs_per_block.max(1),
    };
    let outcome = bcd_minimize(&problem, HierarchyProblem::pack(init), bcd)?;
    Ok((problem.unpack(&outcome.blocks), outcome))
}
