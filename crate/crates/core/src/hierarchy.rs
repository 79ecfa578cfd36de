//! Class hierarchy discovery: confusion counts become a dissimilarity
//! matrix, which is clustered bottom-up into a dendrogram.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::ConfusionMatrix;

/// Symmetric, zero-diagonal matrix with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityMatrix {
    d: Vec<Vec<f64>>,
}

impl DissimilarityMatrix {
    /// Validates the invariants.
    pub fn new(d: Vec<Vec<f64>>) -> Result<Self> {
        let c = d.len();
        for (i, row) in d.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Invalid(format!(
                    "row {i} has {} entries, expected {c}",
                    row.len()
                )));
            }
            for (j, &x) in row.iter().enumerate() {
                if x.is_nan() {
                    return Err(Error::Invalid(format!("NaN dissimilarity at ({i}, {j})")));
                }
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::Invalid(format!(
                        "dissimilarity {x} at ({i}, {j}) is outside [0, 1]"
                    )));
                }
                if x != d[j][i] {
                    return Err(Error::Invalid(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
            if row[i] != 0.0 {
                return Err(Error::Invalid(format!("diagonal entry {i} is {}", row[i])));
            }
        }
        Ok(Self { d })
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.d
    }
}

/// Row-normalizes, symmetrizes and inverts a confusion matrix
/// (`counts[true][predicted]`). Rows with no mass become identity rows.
pub fn similarity_from_confusion(m: &[Vec<f64>]) -> Result<DissimilarityMatrix> {
    let c = m.len();
    if c < 2 {
        return Err(Error::Invalid(format!("need at least 2 classes, got {c}")));
    }
    let mut r = vec![vec![0.0; c]; c];
    for (i, row) in m.iter().enumerate() {
        if row.len() != c {
            return Err(Error::Invalid(format!(
                "row {i} has {} entries, expected {c}",
                row.len()
            )));
        }
        if let Some(j) = row.iter().position(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Invalid(format!(
                "confusion entry ({i}, {j}) = {} is not a nonnegative number",
                row[j]
            )));
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for j in 0..c {
                r[i][j] = row[j] / total;
            }
        } else {
            r[i][i] = 1.0;
        }
    }
    let mut d = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in (i + 1)..c {
            let s = 0.5 * (r[i][j] + r[j][i]);
            let x = (1.0 - s).clamp(0.0, 1.0);
            d[i][j] = x;
            d[j][i] = x;
        }
    }
    DissimilarityMatrix::new(d)
}

impl ConfusionMatrix {
    pub fn to_f64(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| r.iter().map(|&x| x as f64).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    #[default]
    Average,
    Single,
    Complete,
}

impl std::str::FromStr for Linkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "single" => Ok(Self::Single),
            "complete" => Ok(Self::Complete),
            _ => Err(Error::Config(format!(
                "unknown linkage {s:?}; expected average, single or complete"
            ))),
        }
    }
}

/// Node `id` was formed by joining nodes `a < b` at `height`. Leaves are
/// `0..C`; merge `i` creates node `C + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: usize,
    pub linkage: Linkage,
    pub merges: Vec<Merge>,
}

/// Bottom-up clustering. Each step joins the closest pair of active
/// clusters; ties go to the pair with the smaller ids.
pub fn agglomerate(d: &DissimilarityMatrix, linkage: Linkage) -> Result<Dendrogram> {
    let c = d.len();
    if c == 0 {
        return Err(Error::Invalid("cannot cluster zero classes".into()));
    }
    // dist[i][j] between active node ids, indexed by node id.
    let total = 2 * c - 1;
    let mut dist = vec![vec![f64::NAN; total]; total];
    for (i, row) in dist.iter_mut().enumerate().take(c) {
        for (j, x) in row.iter_mut().enumerate().take(c) {
            *x = d.get(i, j);
        }
    }
    let mut size = vec![1usize; total];
    let mut active: Vec<usize> = (0..c).collect();
    let mut merges = Vec::with_capacity(c.saturating_sub(1));
    for step in 0..c.saturating_sub(1) {
        let mut best: Option<(f64, usize, usize)> = None;
        for (x, &i) in active.iter().enumerate() {
            for &j in &active[x + 1..] {
                let h = dist[i][j];
                if h.is_nan() {
                    return Err(Error::Invalid(format!(
                        "NaN linkage distance between nodes {i} and {j}"
                    )));
                }
                if best.is_none_or(|(bh, _, _)| h < bh) {
                    best = Some((h, i, j));
                }
            }
        }
        let (height, a, b) = best.expect("at least two active clusters");
        let id = c + step;
        if let Some(prev) = merges.last().map(|m: &Merge| m.height) {
            if height < prev - 1e-12 {
                return Err(Error::Invalid(format!(
                    "merge heights decreased from {prev} to {height} ({linkage:?} linkage)"
                )));
            }
        }
        merges.push(Merge { a, b, height, id });
        active.retain(|&k| k != a && k != b);
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for &k in &active {
            let v = match linkage {
                Linkage::Average => (na * dist[k][a] + nb * dist[k][b]) / (na + nb),
                Linkage::Single => dist[k][a].min(dist[k][b]),
                Linkage::Complete => dist[k][a].max(dist[k][b]),
            };
            dist[k][id] = v;
            dist[id][k] = v;
        }
        size[id] = size[a] + size[b];
        // Active ids stay sorted because new ids exceed all existing ones.
        active.push(id);
    }
    Ok(Dendrogram {
        leaves: c,
        linkage,
        merges,
    })
}

impl Dendrogram {
    fn height_of(&self, node: usize) -> f64 {
        if node < self.leaves {
            0.0
        } else {
            self.merges[node - self.leaves].height
        }
    }

    fn root(&self) -> usize {
        self.merges.last().map_or(0, |m| m.id)
    }

    fn leaves_under(&self, node: usize, out: &mut Vec<usize>) {
        if node < self.leaves {
            out.push(node);
        } else {
            let m = &self.merges[node - self.leaves];
            self.leaves_under(m.a, out);
            self.leaves_under(m.b, out);
        }
    }

    /// Leaf-name sets of every internal node.
    pub fn clades(&self, names: &[String]) -> BTreeSet<BTreeSet<String>> {
        self.merges
            .iter()
            .map(|m| {
                let mut ls = Vec::new();
                self.leaves_under(m.id, &mut ls);
                ls.into_iter().map(|i| names[i].clone()).collect()
            })
            .collect()
    }

    fn check_names(&self, names: &[String]) -> Result<()> {
        if names.len() != self.leaves {
            return Err(Error::Invalid(format!(
                "{} names for a dendrogram with {} leaves",
                names.len(),
                self.leaves
            )));
        }
        Ok(())
    }

    /// Newick text; branch lengths are parent height minus child height.
    pub fn to_newick(&self, names: &[String]) -> Result<String> {
        self.check_names(names)?;
        let mut s = String::new();
        self.write_newick(self.root(), None, names, &mut s);
        s.push(';');
        Ok(s)
    }

    fn write_newick(
        &self,
        node: usize,
        parent_height: Option<f64>,
        names: &[String],
        out: &mut String,
    ) {
        if node < self.leaves {
            out.push_str(&quote_newick(&names[node]));
        } else {
            let m = &self.merges[node - self.leaves];
            out.push('(');
            self.write_newick(m.a, Some(m.height), names, out);
            out.push(',');
            self.write_newick(m.b, Some(m.height), names, out);
            out.push(')');
        }
        if let Some(h) = parent_height {
            let _ = write!(out, ":{}", h - self.height_of(node));
        }
    }

    /// Indented view, one node per line, children under parents.
    pub fn to_text(&self, names: &[String]) -> Result<String> {
        self.check_names(names)?;
        let mut s = String::new();
        self.write_text(self.root(), 0, names, &mut s);
        Ok(s)
    }

    fn write_text(&self, node: usize, depth: usize, names: &[String], out: &mut String) {
        let pad = "  ".repeat(depth);
        if node < self.leaves {
            let _ = writeln!(out, "{pad}- {}", names[node]);
        } else {
            let m = &self.merges[node - self.leaves];
            let _ = writeln!(out, "{pad}+ {:.4}", m.height);
            self.write_text(m.a, depth + 1, names, out);
            self.write_text(m.b, depth + 1, names, out);
        }
    }

    /// JSON merge list with the class names attached.
    pub fn to_json(&self, names: &[String]) -> Result<String> {
        self.check_names(names)?;
        #[derive(Serialize)]
        struct Export<'a> {
            names: &'a [String],
            #[serde(flatten)]
            dendrogram: &'a Dendrogram,
        }
        Ok(serde_json::to_string_pretty(&Export {
            names,
            dendrogram: self,
        })?)
    }
}

fn quote_newick(name: &str) -> String {
    let plain = !name.is_empty()
        && !name
            .chars()
            .any(|ch| ch.is_whitespace() || "()[]':;,".contains(ch));
    if plain {
        name.to_string()
    } else {
        format!("'{}'", name.replace('\'', "''"))
    }
}

/// A parsed Newick tree.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NewickNode {
    pub name: Option<String>,
    pub length: Option<f64>,
    pub children: Vec<NewickNode>,
}

impl NewickNode {
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = NewickParser {
            s: text.as_bytes(),
            pos: 0,
        };
        p.skip_ws();
        let node = p.node()?;
        p.skip_ws();
        p.expect(b';')?;
        p.skip_ws();
        if p.pos != p.s.len() {
            return Err(p.error("trailing text after ';'"));
        }
        Ok(node)
    }

    fn collect_leaves(&self, out: &mut BTreeSet<String>) {
        if self.children.is_empty() {
            out.insert(self.name.clone().unwrap_or_default());
        }
        for ch in &self.children {
            ch.collect_leaves(out);
        }
    }

    /// Leaf-name sets of every internal node.
    pub fn clades(&self) -> BTreeSet<BTreeSet<String>> {
        let mut out = BTreeSet::new();
        self.collect_clades(&mut out);
        out
    }

    fn collect_clades(&self, out: &mut BTreeSet<BTreeSet<String>>) {
        if !self.children.is_empty() {
            let mut leaves = BTreeSet::new();
            self.collect_leaves(&mut leaves);
            out.insert(leaves);
            for ch in &self.children {
                ch.collect_clades(out);
            }
        }
    }
}

struct NewickParser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl NewickParser<'_> {
    fn error(&self, reason: &str) -> Error {
        Error::Format {
            what: "newick",
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected '{}'", c as char)))
        }
    }

    fn node(&mut self) -> Result<NewickNode> {
        let mut node = NewickNode::default();
        if self.peek() == Some(b'(') {
            self.pos += 1;
            loop {
                self.skip_ws();
                node.children.push(self.node()?);
                self.skip_ws();
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    _ => return Err(self.error("expected ',' or ')'")),
                }
            }
        }
        self.skip_ws();
        node.name = self.label()?;
        self.skip_ws();
        if self.peek() == Some(b':') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while self
                .peek()
                .is_some_and(|c| c.is_ascii_digit() || b"+-.eE".contains(&c))
            {
                self.pos += 1;
            }
            let text = std::str::from_utf8(&self.s[start..self.pos]).expect("ascii");
            node.length = Some(text.parse().map_err(|_| self.error("bad branch length"))?);
        }
        Ok(node)
    }

    fn label(&mut self) -> Result<Option<String>> {
        if self.peek() == Some(b'\'') {
            self.pos += 1;
            let mut bytes = Vec::new();
            loop {
                match self.peek() {
                    None => return Err(self.error("unterminated quoted label")),
                    Some(b'\'') if self.s.get(self.pos + 1) == Some(&b'\'') => {
                        bytes.push(b'\'');
                        self.pos += 2;
                    }
                    Some(b'\'') => {
                        self.pos += 1;
                        break;
                    }
                    Some(c) => {
                        bytes.push(c);
                        self.pos += 1;
                    }
                }
            }
            return String::from_utf8(bytes)
                .map(Some)
                .map_err(|_| self.error("label is not UTF-8"));
        }
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| !c.is_ascii_whitespace() && !b"()[]':;,".contains(&c))
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Ok(None);
        }
        let raw = std::str::from_utf8(&self.s[start..self.pos])
            .map_err(|_| self.error("label is not UTF-8"))?;
        Ok(Some(raw.replace('_', " ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn two_by_two_example() {
        let d = similarity_from_confusion(&[vec![8.0, 2.0], vec![2.0, 8.0]]).unwrap();
        assert_eq!(d.get(0, 0), 0.0);
        assert!((d.get(0, 1) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn perfect_classifier_is_maximally_distant() {
        let d = similarity_from_confusion(&[
            vec![3.0, 0.0, 0.0],
            vec![0.0, 5.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d.get(i, j), if i == j { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn mutual_confusion_is_close() {
        let d = similarity_from_confusion(&[
            vec![1.0, 9.0, 0.0],
            vec![9.0, 1.0, 0.0],
            vec![0.0, 0.0, 5.0],
        ])
        .unwrap();
        assert!(d.get(0, 1) < 0.2);
    }

    #[test]
    fn zero_row_and_negative_entry() {
        let d = similarity_from_confusion(&[vec![0.0, 0.0], vec![0.0, 4.0]]).unwrap();
        assert_eq!(d.get(0, 1), 1.0);
        assert!(similarity_from_confusion(&[vec![1.0, -1.0], vec![0.0, 1.0]]).is_err());
        assert!(similarity_from_confusion(&[vec![1.0]]).is_err());
    }

    #[test]
    fn three_class_trace() {
        let d = DissimilarityMatrix::new(vec![
            vec![0.0, 0.2, 0.9],
            vec![0.2, 0.0, 0.9],
            vec![0.9, 0.9, 0.0],
        ])
        .unwrap();
        let g = agglomerate(&d, Linkage::Average).unwrap();
        assert_eq!(
            g.merges[0],
            Merge {
                a: 0,
                b: 1,
                height: 0.2,
                id: 3
            }
        );
        assert_eq!(
            (g.merges[1].a, g.merges[1].b, g.merges[1].height),
            (2, 3, 0.9)
        );
    }

    #[test]
    fn two_leaves() {
        let d = DissimilarityMatrix::new(vec![vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap();
        let g = agglomerate(&d, Linkage::Average).unwrap();
        assert_eq!(g.merges.len(), 1);
        assert_eq!(g.to_newick(&names(&["A", "B"])).unwrap(), "(A:0.5,B:0.5);");
        assert!(g.to_newick(&names(&["A"])).is_err());
    }

    #[test]
    fn ties_merge_smallest_ids_first() {
        let mut m = vec![vec![0.7; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        let g = agglomerate(&DissimilarityMatrix::new(m).unwrap(), Linkage::Average).unwrap();
        assert_eq!((g.merges[0].a, g.merges[0].b), (0, 1));
        assert_eq!((g.merges[1].a, g.merges[1].b), (2, 3));
    }

    #[test]
    fn linkages_differ() {
        let d = DissimilarityMatrix::new(vec![
            vec![0.0, 0.1, 0.4, 1.0],
            vec![0.1, 0.0, 0.8, 0.9],
            vec![0.4, 0.8, 0.0, 0.7],
            vec![1.0, 0.9, 0.7, 0.0],
        ])
        .unwrap();
        let h = |l| agglomerate(&d, l).unwrap().merges[1].height;
        assert_eq!(h(Linkage::Single), 0.4);
        assert_eq!(h(Linkage::Complete), 0.7);
        assert!((h(Linkage::Average) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn invalid_matrices_are_rejected() {
        assert!(DissimilarityMatrix::new(vec![vec![0.0, f64::NAN], vec![f64::NAN, 0.0]]).is_err());
        assert!(DissimilarityMatrix::new(vec![vec![0.0, 0.2], vec![0.3, 0.0]]).is_err());
        assert!(DissimilarityMatrix::new(vec![vec![0.1, 0.2], vec![0.2, 0.0]]).is_err());
    }

    #[test]
    fn quoting_and_round_trip() {
        let n = names(&["Small Car", "a,b", "it's", "Bus"]);
        let d = DissimilarityMatrix::new(vec![
            vec![0.0, 0.3, 0.8, 0.9],
            vec![0.3, 0.0, 0.7, 0.9],
            vec![0.8, 0.7, 0.0, 0.6],
            vec![0.9, 0.9, 0.6, 0.0],
        ])
        .unwrap();
        let g = agglomerate(&d, Linkage::Average).unwrap();
        let text = g.to_newick(&n).unwrap();
        assert!(text.contains("'a,b'") && text.contains("'it''s'") && text.contains("'Small Car'"));
        let parsed = NewickNode::parse(&text).unwrap();
        assert_eq!(parsed.clades(), g.clades(&n));
        assert!(NewickNode::parse("(A,B").is_err());
    }

    #[test]
    fn text_and_json_views() {
        let d = DissimilarityMatrix::new(vec![vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap();
        let g = agglomerate(&d, Linkage::Average).unwrap();
        let n = names(&["A", "B"]);
        assert_eq!(g.to_text(&n).unwrap(), "+ 0.5000\n  - A\n  - B\n");
        let v: serde_json::Value = serde_json::from_str(&g.to_json(&n).unwrap()).unwrap();
        assert_eq!(v["merges"][0]["height"], 0.5);
        assert_eq!(v["linkage"], "average");
    }

    fn matrix(c: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(0.0f64..100.0, c), c)
    }

    proptest! {
        #[test]
        fn dissimilarity_invariants(m in (2usize..8).prop_flat_map(matrix)) {
            let d = similarity_from_confusion(&m).unwrap();
            for i in 0..m.len() {
                prop_assert_eq!(d.get(i, i), 0.0);
                for j in 0..m.len() {
                    prop_assert_eq!(d.get(i, j), d.get(j, i));
                    prop_assert!((0.0..=1.0).contains(&d.get(i, j)));
                }
            }
        }

        #[test]
        fn heights_monotone_and_first_merge_minimal(m in (2usize..10).prop_flat_map(matrix), l in 0usize..3) {
            let linkage = [Linkage::Average, Linkage::Single, Linkage::Complete][l];
            let d = similarity_from_confusion(&m).unwrap();
            let g = agglomerate(&d, linkage).unwrap();
            prop_assert_eq!(g.merges.len(), m.len() - 1);
            prop_assert!(g.merges.windows(2).all(|w| w[0].height <= w[1].height));
            let mut min = f64::INFINITY;
            for i in 0..m.len() {
                for j in (i + 1)..m.len() {
                    min = min.min(d.get(i, j));
                }
            }
            prop_assert_eq!(g.merges[0].height, min);
        }

        #[test]
        fn relabeling_preserves_topology(m in (3usize..8).prop_flat_map(matrix), shift in 1usize..7) {
            // Continuous random entries make ties vanishingly unlikely.
            let c = m.len();
            let perm: Vec<usize> = (0..c).map(|i| (i + shift) % c).collect();
            let mut pm = vec![vec![0.0; c]; c];
            for i in 0..c {
                for j in 0..c {
                    pm[perm[i]][perm[j]] = m[i][j];
                }
            }
            let n: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
            let mut pn = vec![String::new(); c];
            for i in 0..c {
                pn[perm[i]] = n[i].clone();
            }
            let g = agglomerate(&similarity_from_confusion(&m).unwrap(), Linkage::Average).unwrap();
            let pg = agglomerate(&similarity_from_confusion(&pm).unwrap(), Linkage::Average).unwrap();
            prop_assert_eq!(g.clades(&n), pg.clades(&pn));
        }
    }
}
