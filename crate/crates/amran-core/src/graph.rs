//! Co-occurrence statistics, SPPMI and TF-IDF edge weights, the weighted
//! heterogeneous adjacency, and neighbor selection for both attention
//! modules.
//!
//! All logarithms are natural. Pair counts use the ordered convention: each
//! unordered co-occurrence is counted in both directions, so the marginals
//! sum to the total and PMI probabilities normalize; any other convention
//! shifts PMI by a constant that the shift `k` absorbs.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{InteractionDataset, UrlId, UserId};
use crate::error::{Error, Result};

/// Node in the heterogeneous graph: users come first, URLs after.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeType {
    User,
    Url,
}

/// Symmetric co-occurrence counts over one node family, ordered-pair
/// convention: `total` sums all (i,j), i != j, counts in both directions and
/// `marginals[i]` sums that node's row.
#[derive(Debug, Clone, Default)]
pub struct CooccurrenceCounts {
    pub pair_counts: HashMap<(usize, usize), u64>,
    pub marginals: Vec<u64>,
    pub total: u64,
}

impl CooccurrenceCounts {
    pub fn pair(&self, i: usize, j: usize) -> u64 {
        let key = if i <= j { (i, j) } else { (j, i) };
        self.pair_counts.get(&key).copied().unwrap_or(0)
    }
}

/// Counts for users (sharing posted URLs) and URLs (sharing posting users).
#[derive(Debug, Clone)]
pub struct GraphCounts {
    pub users: CooccurrenceCounts,
    pub urls: CooccurrenceCounts,
}

/// User pair count = distinct URLs both posted; URL pair count = distinct
/// users who posted both. Binary Y drives both (post multiplicity only
/// matters for TF).
pub fn build_cooccurrence_counts(ds: &InteractionDataset) -> GraphCounts {
    let mut urls_per_user: Vec<Vec<usize>> = vec![Vec::new(); ds.n_users()];
    let mut users_per_url: Vec<Vec<usize>> = vec![Vec::new(); ds.n_urls()];
    for i in &ds.interactions {
        urls_per_user[i.user.0].push(i.url.0);
        users_per_url[i.url.0].push(i.user.0);
    }
    for list in urls_per_user.iter_mut().chain(users_per_url.iter_mut()) {
        list.sort_unstable();
        list.dedup();
    }

    GraphCounts {
        users: count_family(&users_per_url, ds.n_users()),
        urls: count_family(&urls_per_user, ds.n_urls()),
    }
}

/// Accumulate pair counts from membership lists: every pair inside one list
/// co-occurs once.
fn count_family(lists: &[Vec<usize>], n: usize) -> CooccurrenceCounts {
    let mut pair_counts: HashMap<(usize, usize), u64> = HashMap::new();
    for members in lists {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                *pair_counts.entry((i, j)).or_insert(0) += 1;
            }
        }
    }
    let mut marginals = vec![0u64; n];
    let mut total = 0u64;
    for (&(i, j), &c) in &pair_counts {
        // ordered convention: both directions
        marginals[i] += c;
        marginals[j] += c;
        total += 2 * c;
    }
    CooccurrenceCounts {
        pair_counts,
        marginals,
        total,
    }
}

/// Sparse symmetric matrix stored as upper-triangle entries.
#[derive(Debug, Clone, Default)]
pub struct SparseSym {
    pub entries: BTreeMap<(usize, usize), f64>,
    n: usize,
}

impl SparseSym {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let key = if i <= j { (i, j) } else { (j, i) };
        self.entries.get(&key).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Neighbors of `i` with weights, ascending by id.
    pub fn row(&self, i: usize) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for (&(a, b), &w) in &self.entries {
            if a == i {
                out.push((b, w));
            } else if b == i {
                out.push((a, w));
            }
        }
        out.sort_by_key(|&(j, _)| j);
        out
    }
}

/// `SPPMI(i,j) = max(ln(#(i,j)·|D| / (#(i)·#(j))) - ln k, 0)`; zero entries
/// are omitted from the sparse structure.
pub fn compute_sppmi(counts: &CooccurrenceCounts, k_shift: f64) -> Result<SparseSym> {
    if k_shift <= 0.0 {
        return Err(Error::Config(format!(
            "SPPMI shift must be positive, got {k_shift}"
        )));
    }
    let mut entries = BTreeMap::new();
    if counts.total == 0 {
        return Ok(SparseSym {
            entries,
            n: counts.marginals.len(),
        });
    }
    let ln_k = k_shift.ln();
    let total = counts.total as f64;
    for (&(i, j), &c) in &counts.pair_counts {
        let pmi = ((c as f64 * total) / (counts.marginals[i] as f64 * counts.marginals[j] as f64))
            .ln();
        let sppmi = pmi - ln_k;
        if sppmi > 0.0 {
            entries.insert((i, j), sppmi);
        }
    }
    Ok(SparseSym {
        entries,
        n: counts.marginals.len(),
    })
}

/// Sparse user -> URL matrix.
#[derive(Debug, Clone, Default)]
pub struct SparseUserUrl {
    pub entries: BTreeMap<(usize, usize), f64>,
    n_users: usize,
    n_urls: usize,
}

impl SparseUserUrl {
    pub fn get(&self, user: usize, url: usize) -> f64 {
        self.entries.get(&(user, url)).copied().unwrap_or(0.0)
    }

    pub fn urls_of(&self, user: usize) -> Vec<(usize, f64)> {
        self.entries
            .range((user, 0)..(user + 1, 0))
            .map(|(&(_, c), &w)| (c, w))
            .collect()
    }
}

/// `TF_ij = #(i,j) / max_k #(i,k)` over raw post multiplicities;
/// `IDF_i = ln(m / m_i)` with `m_i` the user's distinct URL count. Zero
/// weights (users who posted every URL) are dropped.
pub fn compute_tfidf(ds: &InteractionDataset) -> SparseUserUrl {
    let m = ds.n_urls();
    let mut max_count = vec![0u32; ds.n_users()];
    let mut distinct = vec![0usize; ds.n_users()];
    for i in &ds.interactions {
        max_count[i.user.0] = max_count[i.user.0].max(i.count);
        distinct[i.user.0] += 1;
    }
    let mut entries = BTreeMap::new();
    for i in &ds.interactions {
        let u = i.user.0;
        if max_count[u] == 0 {
            continue;
        }
        let tf = i.count as f64 / max_count[u] as f64;
        let idf = (m as f64 / distinct[u] as f64).ln();
        let w = tf * idf;
        if w > 0.0 {
            entries.insert((u, i.url.0), w);
        }
    }
    SparseUserUrl {
        entries,
        n_users: ds.n_users(),
        n_urls: ds.n_urls(),
    }
}

/// Typed weighted adjacency: user-user and URL-URL blocks hold SPPMI, the
/// user-URL block TF-IDF (traversed in both directions with the same
/// weight), and the diagonal is 1 by definition though self edges are never
/// handed out as neighbors.
#[derive(Debug, Clone)]
pub struct HeteroGraph {
    pub n_users: usize,
    pub n_urls: usize,
    pub k_shift: f64,
    pub user_sppmi: SparseSym,
    pub url_sppmi: SparseSym,
    pub tfidf: SparseUserUrl,
    /// Per node: adjacent user-type neighbors (id ascending, weight > 0).
    user_neighbors: Vec<Vec<(NodeId, f64)>>,
    /// Per node: adjacent URL-type neighbors.
    url_neighbors: Vec<Vec<(NodeId, f64)>>,
}

impl HeteroGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_urls
    }

    pub fn node_of_user(&self, u: UserId) -> NodeId {
        NodeId(u.0)
    }

    pub fn node_of_url(&self, c: UrlId) -> NodeId {
        NodeId(self.n_users + c.0)
    }

    pub fn node_type(&self, node: NodeId) -> NodeType {
        if node.0 < self.n_users {
            NodeType::User
        } else {
            NodeType::Url
        }
    }

    /// Adjacency weight between two nodes, including the unit diagonal.
    pub fn weight(&self, a: NodeId, b: NodeId) -> f64 {
        if a == b {
            return 1.0;
        }
        match (self.node_type(a), self.node_type(b)) {
            (NodeType::User, NodeType::User) => self.user_sppmi.get(a.0, b.0),
            (NodeType::Url, NodeType::Url) => {
                self.url_sppmi.get(a.0 - self.n_users, b.0 - self.n_users)
            }
            (NodeType::User, NodeType::Url) => self.tfidf.get(a.0, b.0 - self.n_users),
            (NodeType::Url, NodeType::User) => self.tfidf.get(b.0, a.0 - self.n_users),
        }
    }

    /// Neighbors of one type, self excluded, ascending by id.
    pub fn typed_neighbors(&self, node: NodeId, ty: NodeType) -> &[(NodeId, f64)] {
        match ty {
            NodeType::User => &self.user_neighbors[node.0],
            NodeType::Url => &self.url_neighbors[node.0],
        }
    }

    /// Persist the three sparse blocks as `row,col,weight` triplet files plus
    /// a manifest recording the shift constant and id-map checksums.
    pub fn write_triplets(&self, dir: &Path, id_checksum: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_sym(&self.user_sppmi, &dir.join("user_sppmi.csv"))?;
        write_sym(&self.url_sppmi, &dir.join("url_sppmi.csv"))?;
        let mut f = File::create(dir.join("tfidf.csv"))?;
        writeln!(f, "row,col,weight")?;
        for (&(u, c), &w) in &self.tfidf.entries {
            writeln!(f, "{u},{c},{w:.17}")?;
        }
        let mut f = File::create(dir.join("manifest.toml"))?;
        writeln!(f, "k_shift = {}", self.k_shift)?;
        writeln!(f, "log_base = \"e\"")?;
        writeln!(f, "id_map_checksum = \"{id_checksum}\"")?;
        writeln!(f, "n_users = {}", self.n_users)?;
        writeln!(f, "n_urls = {}", self.n_urls)?;
        Ok(())
    }
}

fn write_sym(m: &SparseSym, path: &Path) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "row,col,weight")?;
    for (&(i, j), &w) in &m.entries {
        writeln!(f, "{i},{j},{w:.17}")?;
    }
    Ok(())
}

/// Assemble the typed adjacency from its blocks.
pub fn assemble_adjacency(
    user_sppmi: SparseSym,
    url_sppmi: SparseSym,
    tfidf: SparseUserUrl,
    n_users: usize,
    n_urls: usize,
    k_shift: f64,
) -> Result<HeteroGraph> {
    if user_sppmi.n() != n_users || url_sppmi.n() != n_urls {
        return Err(Error::Shape(format!(
            "adjacency blocks disagree: user sppmi {} vs {n_users}, url sppmi {} vs {n_urls}",
            user_sppmi.n(),
            url_sppmi.n()
        )));
    }
    if tfidf.n_users != n_users || tfidf.n_urls != n_urls {
        return Err(Error::Shape(
            "tfidf block dimensions disagree with the node counts".into(),
        ));
    }
    let n_nodes = n_users + n_urls;
    let mut user_neighbors: Vec<Vec<(NodeId, f64)>> = vec![Vec::new(); n_nodes];
    let mut url_neighbors: Vec<Vec<(NodeId, f64)>> = vec![Vec::new(); n_nodes];

    for (&(i, j), &w) in &user_sppmi.entries {
        user_neighbors[i].push((NodeId(j), w));
        user_neighbors[j].push((NodeId(i), w));
    }
    for (&(i, j), &w) in &url_sppmi.entries {
        url_neighbors[n_users + i].push((NodeId(n_users + j), w));
        url_neighbors[n_users + j].push((NodeId(n_users + i), w));
    }
    for (&(u, c), &w) in &tfidf.entries {
        url_neighbors[u].push((NodeId(n_users + c), w));
        user_neighbors[n_users + c].push((NodeId(u), w));
    }
    for list in user_neighbors.iter_mut().chain(url_neighbors.iter_mut()) {
        list.sort_by_key(|&(id, _)| id);
    }

    Ok(HeteroGraph {
        n_users,
        n_urls,
        k_shift,
        user_sppmi,
        url_sppmi,
        tfidf,
        user_neighbors,
        url_neighbors,
    })
}

/// Build everything from a dataset (typically the train view).
pub fn build_graph(ds: &InteractionDataset, k_shift: f64) -> Result<HeteroGraph> {
    let counts = build_cooccurrence_counts(ds);
    let user_sppmi = compute_sppmi(&counts.users, k_shift)?;
    let url_sppmi = compute_sppmi(&counts.urls, k_shift)?;
    let tfidf = compute_tfidf(ds);
    assemble_adjacency(
        user_sppmi,
        url_sppmi,
        tfidf,
        ds.n_users(),
        ds.n_urls(),
        k_shift,
    )
}

/// Fixed-width neighbor slots with a pad mask (true where padded).
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSlots {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl PaddedSlots {
    fn from_ranked(mut ranked: Vec<(usize, f64)>, width: usize) -> PaddedSlots {
        // top weights first, ties by ascending id
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        ranked.truncate(width);
        let real = ranked.len();
        let mut ids: Vec<usize> = ranked.into_iter().map(|(id, _)| id).collect();
        let mut mask = vec![false; real];
        ids.resize(width, 0);
        mask.resize(width, true);
        PaddedSlots { ids, mask }
    }

    pub fn real_count(&self) -> usize {
        self.mask.iter().filter(|&&p| !p).count()
    }
}

/// Per-layer, per-central-node sampled typed neighborhood.
#[derive(Debug, Clone, Default)]
pub struct LayerSamples {
    /// `per_layer[l]` maps each central node to its (user, URL) neighbor
    /// draws for the aggregation feeding layer `l + 1`.
    pub per_layer: Vec<BTreeMap<NodeId, TypedSample>>,
}

#[derive(Debug, Clone)]
pub struct TypedSample {
    pub users: Vec<NodeId>,
    pub urls: Vec<NodeId>,
}

/// The four wide-context streams plus the sampled deep-context neighborhood
/// for one (user, URL) target pair.
#[derive(Debug, Clone)]
pub struct NeighborContext {
    pub target_user: UserId,
    pub target_url: UrlId,
    pub social_users: PaddedSlots,
    pub cooccur_users: PaddedSlots,
    pub historical_urls: PaddedSlots,
    pub cooccur_urls: PaddedSlots,
    pub layer_samples: LayerSamples,
}

/// Select the four CSAN streams for a target pair. Social users are the
/// followees of the target user (no edge weights exist there, so ties break
/// by ascending id); co-occurrence streams rank by SPPMI; the historical
/// stream ranks the user's other train URLs by TF-IDF and never contains the
/// target URL.
pub fn select_csan_neighbors(
    graph: &HeteroGraph,
    followees: &[Vec<UserId>],
    target_user: UserId,
    target_url: UrlId,
    b_h: usize,
) -> (PaddedSlots, PaddedSlots, PaddedSlots, PaddedSlots) {
    let social: Vec<(usize, f64)> = followees[target_user.0]
        .iter()
        .map(|u| (u.0, 1.0))
        .collect();
    let cooccur_users: Vec<(usize, f64)> = graph.user_sppmi.row(target_user.0);
    let historical: Vec<(usize, f64)> = graph
        .tfidf
        .urls_of(target_user.0)
        .into_iter()
        .filter(|&(c, _)| c != target_url.0)
        .collect();
    let cooccur_urls: Vec<(usize, f64)> = graph.url_sppmi.row(target_url.0);

    (
        PaddedSlots::from_ranked(social, b_h),
        PaddedSlots::from_ranked(cooccur_users, b_h),
        PaddedSlots::from_ranked(historical, b_h),
        PaddedSlots::from_ranked(cooccur_urls, b_h),
    )
}

/// Weighted random selection without replacement: every candidate draws
/// `u ~ Uniform(0,1)` and the `count` largest `u^(1/weight)` keys win.
pub fn wrs_sample(
    candidates: &[(usize, f64)],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::Config("wrs_sample: count must be at least 1".into()));
    }
    let mut keyed = Vec::with_capacity(candidates.len());
    for &(id, w) in candidates {
        if w <= 0.0 {
            return Err(Error::Domain(format!(
                "wrs_sample: weight of candidate {id} must be positive, got {w}"
            )));
        }
        let u: f64 = rng.gen();
        keyed.push((u.powf(1.0 / w), id));
    }
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    keyed.truncate(count);
    Ok(keyed.into_iter().map(|(_, id)| id).collect())
}

/// Draw the per-layer typed neighborhoods for an HGAN forward pass rooted at
/// the target pair. The top layer excludes the opposite target from each
/// target's own neighborhood so a train edge cannot leak the label.
pub fn sample_layer_neighborhoods(
    graph: &HeteroGraph,
    target_user: UserId,
    target_url: UrlId,
    layers: usize,
    budget: usize,
    seed: u64,
) -> Result<LayerSamples> {
    let user_node = graph.node_of_user(target_user);
    let url_node = graph.node_of_url(target_url);
    let mut per_layer: Vec<BTreeMap<NodeId, TypedSample>> = vec![BTreeMap::new(); layers];

    // top layer: the two targets
    let mut centrals: Vec<NodeId> = vec![user_node, url_node];
    centrals.sort();
    centrals.dedup();

    for layer in (0..layers).rev() {
        let mut next: Vec<NodeId> = centrals.clone();
        for &central in &centrals {
            let exclude = if layer == layers - 1 {
                if central == user_node {
                    Some(url_node)
                } else if central == url_node {
                    Some(user_node)
                } else {
                    None
                }
            } else {
                None
            };
            let mut rng = layer_rng(seed, layer, central);
            let sample = sample_typed(graph, central, exclude, budget, &mut rng)?;
            next.extend(sample.users.iter().copied());
            next.extend(sample.urls.iter().copied());
            per_layer[layer].insert(central, sample);
        }
        next.sort();
        next.dedup();
        centrals = next;
    }
    Ok(LayerSamples { per_layer })
}

fn layer_rng(seed: u64, layer: usize, central: NodeId) -> ChaCha8Rng {
    // cheap stable mix; the stream only has to be reproducible
    let mixed = seed
        ^ (layer as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (central.0 as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    ChaCha8Rng::seed_from_u64(mixed)
}

fn sample_typed(
    graph: &HeteroGraph,
    central: NodeId,
    exclude: Option<NodeId>,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TypedSample> {
    let pick = |neigh: &[(NodeId, f64)], rng: &mut ChaCha8Rng| -> Result<Vec<NodeId>> {
        let cands: Vec<(usize, f64)> = neigh
            .iter()
            .filter(|(id, _)| Some(*id) != exclude)
            .map(|&(id, w)| (id.0, w))
            .collect();
        if cands.is_empty() {
            return Ok(Vec::new());
        }
        let take = budget.min(cands.len());
        let mut ids = wrs_sample(&cands, take, rng)?;
        ids.sort_unstable();
        Ok(ids.into_iter().map(NodeId).collect())
    };
    Ok(TypedSample {
        users: pick(graph.typed_neighbors(central, NodeType::User), rng)?,
        urls: pick(graph.typed_neighbors(central, NodeType::Url), rng)?,
    })
}

/// Followee lists per user, ascending by id.
pub fn followee_lists(ds: &InteractionDataset) -> Vec<Vec<UserId>> {
    let mut lists: Vec<Vec<UserId>> = vec![Vec::new(); ds.n_users()];
    for &(follower, followee) in &ds.social_edges {
        lists[follower.0].push(followee);
    }
    for l in &mut lists {
        l.sort();
        l.dedup();
    }
    lists
}

/// Full context for one target pair.
#[allow(clippy::too_many_arguments)]
pub fn build_context(
    graph: &HeteroGraph,
    followees: &[Vec<UserId>],
    target_user: UserId,
    target_url: UrlId,
    b_h: usize,
    layers: usize,
    budget: usize,
    seed: u64,
) -> Result<NeighborContext> {
    let (social_users, cooccur_users, historical_urls, cooccur_urls) =
        select_csan_neighbors(graph, followees, target_user, target_url, b_h);
    let layer_samples =
        sample_layer_neighborhoods(graph, target_user, target_url, layers, budget, seed)?;
    Ok(NeighborContext {
        target_user,
        target_url,
        social_users,
        cooccur_users,
        historical_urls,
        cooccur_urls,
        layer_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_interactions;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeSet;

    /// Brute-force PMI oracle straight from the definitions, sets and all.
    fn brute_force_sppmi(
        memberships: &[BTreeSet<usize>],
        n: usize,
        k_shift: f64,
    ) -> BTreeMap<(usize, usize), f64> {
        // memberships[x] = set of entities containing item x
        let mut out = BTreeMap::new();
        let count_pair = |i: usize, j: usize| -> u64 {
            memberships
                .iter()
                .filter(|s| s.contains(&i) && s.contains(&j))
                .count() as u64
        };
        let mut total = 0u64;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    total += count_pair(i, j);
                }
            }
        }
        if total == 0 {
            return out;
        }
        let marginal =
            |i: usize| -> u64 { (0..n).filter(|&j| j != i).map(|j| count_pair(i, j)).sum() };
        for i in 0..n {
            for j in (i + 1)..n {
                let c = count_pair(i, j);
                if c == 0 {
                    continue;
                }
                let pmi: f64 = (c as f64 * total as f64)
                    / (marginal(i) as f64 * marginal(j) as f64);
                let v = pmi.ln() - k_shift.ln();
                if v > 0.0 {
                    out.insert((i, j), v);
                }
            }
        }
        out
    }

    fn toy_dataset(rows: &[(&str, &str)]) -> InteractionDataset {
        let dir = tempfile::tempdir().unwrap();
        let mut content = String::from("user_id,url_id,timestamp\n");
        for (i, (u, c)) in rows.iter().enumerate() {
            content.push_str(&format!("{u},{c},{i}\n"));
        }
        let p = dir.path().join("i.csv");
        std::fs::write(&p, content).unwrap();
        load_interactions(&p).unwrap()
    }

    #[test]
    fn cooccurrence_counts_match_hand_example() {
        // u1: {A,B}, u2: {A,B}, u3: {A} plus filler to survive the filter
        let ds = toy_dataset(&[
            ("u1", "A"),
            ("u1", "B"),
            ("u1", "x1"),
            ("u2", "A"),
            ("u2", "B"),
            ("u2", "x2"),
            ("u3", "A"),
            ("u3", "x3"),
            ("u3", "x4"),
        ]);
        let counts = build_cooccurrence_counts(&ds);
        let u1 = ds.user_id("u1").unwrap().0;
        let u2 = ds.user_id("u2").unwrap().0;
        let u3 = ds.user_id("u3").unwrap().0;
        assert_eq!(counts.users.pair(u1, u2), 2);
        assert_eq!(counts.users.pair(u1, u3), 1);
        assert_eq!(counts.users.pair(u2, u3), 1);
        assert_eq!(counts.users.total, 8);
        assert_eq!(counts.users.marginals[u1], 3);
    }

    #[test]
    fn single_user_has_no_user_pairs() {
        let ds = toy_dataset(&[("u1", "A"), ("u1", "B"), ("u1", "C")]);
        let counts = build_cooccurrence_counts(&ds);
        assert!(counts.users.pair_counts.is_empty());
        assert_eq!(counts.users.total, 0);
    }

    #[test]
    fn url_pair_counts_are_shared_posters() {
        // A and B are both posted by exactly u1 and u2
        let ds = toy_dataset(&[
            ("u1", "A"),
            ("u1", "B"),
            ("u1", "C"),
            ("u2", "A"),
            ("u2", "B"),
            ("u2", "D"),
        ]);
        let counts = build_cooccurrence_counts(&ds);
        let a = ds.url_id("A").unwrap().0;
        let b = ds.url_id("B").unwrap().0;
        assert_eq!(counts.urls.pair(a, b), 2);
    }

    #[test]
    fn sppmi_matches_hand_computation() {
        let ds = toy_dataset(&[
            ("u1", "A"),
            ("u1", "B"),
            ("u1", "x1"),
            ("u2", "A"),
            ("u2", "B"),
            ("u2", "x2"),
            ("u3", "A"),
            ("u3", "x3"),
            ("u3", "x4"),
        ]);
        let counts = build_cooccurrence_counts(&ds);
        let m1 = compute_sppmi(&counts.users, 1.0).unwrap();
        let u1 = ds.user_id("u1").unwrap().0;
        let u2 = ds.user_id("u2").unwrap().0;
        let expect = (2.0f64 * 8.0 / (3.0 * 3.0)).ln();
        assert!((m1.get(u1, u2) - expect).abs() < 1e-12);
        assert!((expect - 0.575).abs() < 1e-3);

        // shifting by k = 2 pushes this entry to zero and drops it
        let m2 = compute_sppmi(&counts.users, 2.0).unwrap();
        assert_eq!(m2.get(u1, u2), 0.0);
        let key = (u1.min(u2), u1.max(u2));
        assert!(m2.entries.keys().all(|k| *k != key));
    }

    #[test]
    fn sppmi_rejects_nonpositive_shift() {
        let counts = CooccurrenceCounts::default();
        assert!(compute_sppmi(&counts, 0.0).is_err());
        assert!(compute_sppmi(&counts, -1.0).is_err());
    }

    #[test]
    fn tfidf_matches_formula() {
        // u1 posted A three times and B once; catalog has 4 urls, m_i = 2
        let ds = toy_dataset(&[
            ("u1", "A"),
            ("u1", "A"),
            ("u1", "A"),
            ("u1", "B"),
            ("u1", "Z"),
            ("u2", "C"),
            ("u2", "D"),
            ("u2", "A"),
        ]);
        // note: u1 needs >= 3 distinct urls to survive the filter, so the
        // hand numbers below use m = 5 catalog urls and m_1 = 3
        let tfidf = compute_tfidf(&ds);
        let u1 = ds.user_id("u1").unwrap().0;
        let a = ds.url_id("A").unwrap().0;
        let b = ds.url_id("B").unwrap().0;
        let idf = (5.0f64 / 3.0).ln();
        assert!((tfidf.get(u1, a) - idf).abs() < 1e-12);
        assert!((tfidf.get(u1, b) - idf / 3.0).abs() < 1e-12);
    }

    #[test]
    fn user_posting_everything_gets_no_tfidf_edges() {
        let ds = toy_dataset(&[("u1", "A"), ("u1", "B"), ("u1", "C")]);
        let tfidf = compute_tfidf(&ds);
        assert!(tfidf.entries.is_empty());
    }

    #[test]
    fn adjacency_diagonal_is_one_and_blocks_route() {
        let ds = toy_dataset(&[
            ("u1", "A"),
            ("u1", "B"),
            ("u1", "x1"),
            ("u2", "A"),
            ("u2", "B"),
            ("u2", "x2"),
        ]);
        let g = build_graph(&ds, 1.0).unwrap();
        for i in 0..g.n_nodes() {
            assert_eq!(g.weight(NodeId(i), NodeId(i)), 1.0);
        }
        let u1 = g.node_of_user(ds.user_id("u1").unwrap());
        let a = g.node_of_url(ds.url_id("A").unwrap());
        let expected = g
            .tfidf
            .get(ds.user_id("u1").unwrap().0, ds.url_id("A").unwrap().0);
        assert!(expected > 0.0);
        assert_eq!(g.weight(u1, a), expected);
        assert_eq!(g.weight(a, u1), expected);
    }

    #[test]
    fn adjacency_rebuild_is_identical() {
        let ds = toy_dataset(&[
            ("u1", "A"),
            ("u1", "B"),
            ("u1", "C"),
            ("u2", "A"),
            ("u2", "B"),
            ("u2", "D"),
            ("u3", "C"),
            ("u3", "D"),
            ("u3", "A"),
        ]);
        let a = build_graph(&ds, 1.0).unwrap();
        let b = build_graph(&ds, 1.0).unwrap();
        assert_eq!(a.user_sppmi.entries, b.user_sppmi.entries);
        assert_eq!(a.url_sppmi.entries, b.url_sppmi.entries);
        assert_eq!(a.tfidf.entries, b.tfidf.entries);
    }

    #[test]
    fn csan_streams_pad_truncate_and_exclude_target() {
        let ds = toy_dataset(&[
            ("u1", "A"),
            ("u1", "B"),
            ("u1", "C"),
            ("u2", "A"),
            ("u2", "B"),
            ("u2", "D"),
        ]);
        let g = build_graph(&ds, 1.0).unwrap();
        let followees = vec![vec![ds.user_id("u2").unwrap()], vec![]];
        let u1 = ds.user_id("u1").unwrap();
        let target = ds.url_id("A").unwrap();
        let (social, _, hist, _) = select_csan_neighbors(&g, &followees, u1, target, 10);
        assert_eq!(social.real_count(), 1);
        assert_eq!(social.mask.iter().filter(|&&p| p).count(), 9);
        // historical stream never contains the target url
        assert!(hist
            .ids
            .iter()
            .zip(&hist.mask)
            .filter(|(_, &pad)| !pad)
            .all(|(&c, _)| c != target.0));
    }

    #[test]
    fn csan_truncation_takes_top_weights() {
        let mut ranked: Vec<(usize, f64)> = (0..12).map(|i| (i, i as f64 + 1.0)).collect();
        ranked.reverse();
        let slots = PaddedSlots::from_ranked(ranked, 10);
        assert_eq!(slots.real_count(), 10);
        // weights 12..3 survive, ids 11..2
        assert_eq!(slots.ids[0], 11);
        assert_eq!(slots.ids[9], 2);
    }

    #[test]
    fn wrs_returns_single_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(wrs_sample(&[(7, 2.0)], 1, &mut rng).unwrap(), vec![7]);
    }

    #[test]
    fn wrs_returns_all_when_short() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let got = wrs_sample(&[(1, 1.0), (2, 1.0)], 5, &mut rng).unwrap();
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn wrs_rejects_nonpositive_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(wrs_sample(&[(1, 0.0)], 1, &mut rng).is_err());
    }

    #[test]
    fn wrs_inclusion_frequency_tracks_weights() {
        // Monte-Carlo oracle: P(select a) for weights {a:9, b:1} is 0.9
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let trials = 100_000;
        let mut hits = 0u32;
        for _ in 0..trials {
            let got = wrs_sample(&[(0, 9.0), (1, 1.0)], 1, &mut rng).unwrap();
            if got[0] == 0 {
                hits += 1;
            }
        }
        let freq = hits as f64 / trials as f64;
        assert!((freq - 0.9).abs() < 0.01, "frequency {freq}");
    }

    #[test]
    fn wrs_never_duplicates() {
        let cands: Vec<(usize, f64)> = (0..20).map(|i| (i, 0.5 + i as f64)).collect();
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let got = wrs_sample(&cands, 8, &mut rng).unwrap();
            let set: BTreeSet<usize> = got.iter().copied().collect();
            assert_eq!(set.len(), got.len());
            assert!(got.iter().all(|id| *id < 20));
        }
    }

    #[test]
    fn layer_samples_are_deterministic_and_exclude_target_pairing() {
        let ds = toy_dataset(&[
            ("u1", "A"),
            ("u1", "B"),
            ("u1", "C"),
            ("u2", "A"),
            ("u2", "B"),
            ("u2", "D"),
            ("u3", "C"),
            ("u3", "D"),
            ("u3", "A"),
        ]);
        let g = build_graph(&ds, 1.0).unwrap();
        let u1 = ds.user_id("u1").unwrap();
        let a = ds.url_id("A").unwrap();
        let s1 = sample_layer_neighborhoods(&g, u1, a, 2, 8, 5).unwrap();
        let s2 = sample_layer_neighborhoods(&g, u1, a, 2, 8, 5).unwrap();
        assert_eq!(s1.per_layer.len(), 2);
        for (l1, l2) in s1.per_layer.iter().zip(&s2.per_layer) {
            assert_eq!(l1.keys().collect::<Vec<_>>(), l2.keys().collect::<Vec<_>>());
            for (k, v) in l1 {
                assert_eq!(v.users, l2[k].users);
                assert_eq!(v.urls, l2[k].urls);
            }
        }
        // top layer: target url never sampled for target user and vice versa
        let top = &s1.per_layer[1];
        let user_node = g.node_of_user(u1);
        let url_node = g.node_of_url(a);
        assert!(!top[&user_node].urls.contains(&url_node));
        assert!(!top[&url_node].users.contains(&user_node));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn sppmi_matches_brute_force_oracle(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n_urls = rng.gen_range(4usize..10);
            let mut rows = Vec::new();
            for u in 0..rng.gen_range(3usize..8) {
                let k = rng.gen_range(3usize..=n_urls.min(6));
                let mut used = BTreeSet::new();
                while used.len() < k {
                    used.insert(rng.gen_range(0..n_urls));
                }
                for c in used {
                    rows.push((format!("u{u}"), format!("c{c}")));
                }
            }
            let refs: Vec<(&str, &str)> = rows.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            let ds = toy_dataset(&refs);
            let counts = build_cooccurrence_counts(&ds);
            for k_shift in [1.0, 2.0, 5.0] {
                let fast = compute_sppmi(&counts.users, k_shift).unwrap();
                // oracle memberships: per url, the set of users who posted it
                let mut memberships = vec![BTreeSet::new(); ds.n_urls()];
                for i in &ds.interactions {
                    memberships[i.url.0].insert(i.user.0);
                }
                let slow = brute_force_sppmi(&memberships, ds.n_users(), k_shift);
                prop_assert_eq!(fast.entries.len(), slow.len());
                for (k, v) in &slow {
                    prop_assert!((fast.entries[k] - v).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn sppmi_is_nonnegative_symmetric_and_shift_monotone(seed in 0u64..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n_urls = rng.gen_range(4usize..9);
            let mut rows = Vec::new();
            for u in 0..rng.gen_range(3usize..7) {
                let k = rng.gen_range(3usize..=n_urls.min(5));
                let mut used = BTreeSet::new();
                while used.len() < k {
                    used.insert(rng.gen_range(0..n_urls));
                }
                for c in used {
                    rows.push((format!("u{u}"), format!("c{c}")));
                }
            }
            let refs: Vec<(&str, &str)> = rows.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            let ds = toy_dataset(&refs);
            let counts = build_cooccurrence_counts(&ds);
            let m1 = compute_sppmi(&counts.users, 1.0).unwrap();
            let m2 = compute_sppmi(&counts.users, 2.0).unwrap();
            for (&(i, j), &w) in &m1.entries {
                prop_assert!(w >= 0.0);
                prop_assert!((m1.get(i, j) - m1.get(j, i)).abs() < 1e-15);
                prop_assert!(m2.get(i, j) <= w + 1e-15);
            }
        }

        #[test]
        fn wrs_sample_is_subset_without_duplicates(seed in 0u64..500, count in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1usize..15);
            let cands: Vec<(usize, f64)> = (0..n).map(|i| (i * 3, rng.gen_range(0.1..5.0))).collect();
            let got = wrs_sample(&cands, count, &mut rng).unwrap();
            prop_assert_eq!(got.len(), count.min(n));
            let ids: BTreeSet<usize> = cands.iter().map(|&(i, _)| i).collect();
            let picked: BTreeSet<usize> = got.iter().copied().collect();
            prop_assert_eq!(picked.len(), got.len());
            prop_assert!(picked.is_subset(&ids));
        }
    }
}
