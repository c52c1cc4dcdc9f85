use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::rng::{self, tag};

/// Fact keys shared by every generated world.
pub const KEYS: [&str; 12] = [
    "price", "rating", "author", "year", "color", "size", "weight", "brand", "model", "stock",
    "origin", "release",
];

/// Fact values shared by every generated world.
pub const VALUES: [&str; 12] = [
    "amber", "birch", "cobalt", "delta", "ember", "fjord", "garnet", "harbor", "indigo", "juniper",
    "kelp", "lumen",
];

/// Abstract thought symbols an agent may emit before acting.
pub const THOUGHTS: [&str; 16] = [
    "look", "seek", "scan", "read", "open", "back", "fill", "done", "check", "note", "plan", "path",
    "page", "item", "form", "list",
];

/// Answer used to close a form task.
pub const DONE: &str = "done";

pub type PageId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldParams {
    pub pages: usize,
    pub elements_per_page: usize,
    pub viewport: usize,
    pub facts: usize,
    /// Number of form fields placed in the world.
    #[serde(default = "default_fields")]
    pub fields: usize,
}

fn default_fields() -> usize {
    2
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            pages: 8,
            elements_per_page: 4,
            viewport: 2,
            facts: 6,
            fields: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Element {
    /// Hyperlink. The labels list the fact keys (`info`) and form keys
    /// (`form`) that live below the target; back links carry empty labels.
    Link {
        target: PageId,
        info: Vec<String>,
        form: Vec<String>,
    },
    Field { key: String },
    Info { key: String },
    Submit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub id: PageId,
    pub elements: Vec<Element>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub params: WorldParams,
    pub home: PageId,
    pub pages: Vec<Page>,
    pub facts: BTreeMap<String, String>,
}

impl World {
    pub fn page(&self, id: PageId) -> Option<&Page> {
        self.pages.get(id)
    }

    /// Page holding `Info(key)`.
    pub fn info_page(&self, key: &str) -> Option<PageId> {
        self.find_page(|e| matches!(e, Element::Info { key: k } if k == key))
    }

    /// Page holding `Field(key)`.
    pub fn field_page(&self, key: &str) -> Option<PageId> {
        self.find_page(|e| matches!(e, Element::Field { key: k } if k == key))
    }

    fn find_page(&self, pred: impl Fn(&Element) -> bool) -> Option<PageId> {
        self.pages
            .iter()
            .find(|p| p.elements.iter().any(&pred))
            .map(|p| p.id)
    }

    pub fn reachable_pages(&self) -> BTreeSet<PageId> {
        let mut seen = BTreeSet::from([self.home]);
        let mut stack = vec![self.home];
        while let Some(p) = stack.pop() {
            for e in &self.pages[p].elements {
                if let Element::Link { target, .. } = e {
                    if seen.insert(*target) {
                        stack.push(*target);
                    }
                }
            }
        }
        seen
    }
}

/// Builds a world: a random link tree rooted at the home page, facts and
/// form fields placed on random pages, optional back links and submit
/// buttons, then each page shuffled once.
pub fn generate_world(seed: u64, params: WorldParams) -> Result<World, SynthError> {
    let WorldParams {
        pages: n_pages,
        elements_per_page: cap,
        viewport,
        facts,
        fields,
    } = params;
    if n_pages < 2 {
        return Err(SynthError::InvalidParams("at least two pages are required".into()));
    }
    if cap < 1 || viewport < 1 {
        return Err(SynthError::InvalidParams("elements per page and viewport must be positive".into()));
    }
    if facts > KEYS.len() || facts > VALUES.len() {
        return Err(SynthError::InvalidParams(format!("at most {} facts", KEYS.len())));
    }
    if fields > facts || fields > n_pages {
        return Err(SynthError::InvalidParams("too many form fields".into()));
    }
    if n_pages * cap < (n_pages - 1) + facts + fields {
        return Err(SynthError::InvalidParams("not enough element slots".into()));
    }

    let mut rng = rng::stream(&[tag::WORLD, seed]);
    for _attempt in 0..64 {
        if let Some(world) = try_generate(seed, params, &mut rng) {
            return Ok(world);
        }
    }
    Err(SynthError::InvalidParams("could not place all elements".into()))
}

fn try_generate(seed: u64, params: WorldParams, rng: &mut rng::Rng) -> Option<World> {
    let cap = params.elements_per_page;
    let n = params.pages;
    let mut parent = vec![None; n];
    let mut content: Vec<Vec<Element>> = vec![Vec::new(); n];
    let mut children: Vec<Vec<PageId>> = vec![Vec::new(); n];

    for child in 1..n {
        let open: Vec<PageId> = (0..child).filter(|&p| content[p].len() < cap).collect();
        let &p = open.choose(rng)?;
        parent[child] = Some(p);
        children[p].push(child);
        content[p].push(Element::Link {
            target: child,
            info: vec![],
            form: vec![],
        });
    }

    let mut keys: Vec<&str> = KEYS.to_vec();
    keys.shuffle(rng);
    keys.truncate(params.facts);
    let mut values: Vec<&str> = VALUES.to_vec();
    values.shuffle(rng);
    let facts: BTreeMap<String, String> = keys
        .iter()
        .zip(&values)
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();

    for key in &keys {
        let open: Vec<PageId> = (0..n).filter(|&p| content[p].len() < cap).collect();
        let &p = open.choose(rng)?;
        content[p].push(Element::Info { key: key.to_string() });
    }
    let mut field_keys = keys.clone();
    field_keys.shuffle(rng);
    for key in field_keys.iter().take(params.fields) {
        let open: Vec<PageId> = (0..n)
            .filter(|&p| {
                content[p].len() < cap && !content[p].iter().any(|e| matches!(e, Element::Field { .. }))
            })
            .collect();
        let &p = open.choose(rng)?;
        content[p].push(Element::Field { key: key.to_string() });
    }

    for p in 0..n {
        if let Some(par) = parent[p] {
            if content[p].len() < cap && rng.gen_bool(0.5) {
                content[p].push(Element::Link {
                    target: par,
                    info: vec![],
                    form: vec![],
                });
            }
        }
        if content[p].len() < cap && rng.gen_bool(0.3) {
            content[p].push(Element::Submit);
        }
        content[p].shuffle(rng);
    }

    // Subtree labels, leaves first (children always have larger ids).
    let mut info_below: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n];
    let mut form_below: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n];
    for p in (0..n).rev() {
        for e in &content[p] {
            match e {
                Element::Info { key } => {
                    info_below[p].insert(key.clone());
                }
                Element::Field { key } => {
                    form_below[p].insert(key.clone());
                }
                _ => {}
            }
        }
        for &c in &children[p] {
            let (i, f) = (info_below[c].clone(), form_below[c].clone());
            info_below[p].extend(i);
            form_below[p].extend(f);
        }
    }
    for p in 0..n {
        for e in content[p].iter_mut() {
            if let Element::Link { target, info, form } = e {
                if parent[*target] == Some(p) {
                    *info = info_below[*target].iter().cloned().collect();
                    *form = form_below[*target].iter().cloned().collect();
                }
            }
        }
    }

    Some(World {
        seed,
        params,
        home: 0,
        pages: content
            .into_iter()
            .enumerate()
            .map(|(id, elements)| Page { id, elements })
            .collect(),
        facts,
    })
}
