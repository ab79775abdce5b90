//! Rooted trees over the p objects, used by the phylogenetic IBP.
//!
//! Every root-to-leaf path has length one, so the total edge length S(𝒯)
//! is at most p. Trees that violate this are rejected.

use std::fmt;

use crate::error::{LfmError, Result};

const DEPTH_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PhyloTree {
    parent: Vec<Option<usize>>,
    /// Length of the edge to the parent; 0 for the root.
    edge: Vec<f64>,
    children: Vec<Vec<usize>>,
    /// Object index held by each node, if it is a leaf.
    object: Vec<Option<usize>>,
    /// Node index of object j.
    leaf_node: Vec<usize>,
    /// Children before parents.
    postorder: Vec<usize>,
    root: usize,
    total_length: f64,
    eta_min: f64,
}

impl PhyloTree {
    /// Builds a tree from parent pointers and edge lengths. `objects[v]`
    /// names the object at leaf `v`; objects must be exactly 0..p, one per
    /// leaf, and internal nodes carry none.
    pub fn from_parents(
        parent: Vec<Option<usize>>,
        edge: Vec<f64>,
        objects: Vec<Option<usize>>,
    ) -> Result<Self> {
        let n = parent.len();
        if edge.len() != n || objects.len() != n {
            return Err(LfmError::Tree(
                "parent, edge and object arrays differ in length".into(),
            ));
        }
        let roots: Vec<usize> = (0..n).filter(|&v| parent[v].is_none()).collect();
        if roots.len() != 1 {
            return Err(LfmError::Tree(format!(
                "expected exactly one root, found {}",
                roots.len()
            )));
        }
        let root = roots[0];
        let mut children = vec![Vec::new(); n];
        for (v, par) in parent.iter().enumerate() {
            if let Some(u) = *par {
                if u >= n {
                    return Err(LfmError::Tree(format!("node {v} has missing parent {u}")));
                }
                children[u].push(v);
                if !(edge[v] > 0.0 && edge[v].is_finite()) {
                    return Err(LfmError::Tree(format!(
                        "edge above node {v} must be positive, got {}",
                        edge[v]
                    )));
                }
            }
        }

        // iterative DFS from the root; also detects cycles / disconnection
        let mut preorder = Vec::with_capacity(n);
        let mut stack = vec![root];
        let mut depth = vec![0.0; n];
        let mut seen = vec![false; n];
        while let Some(v) = stack.pop() {
            if seen[v] {
                return Err(LfmError::Tree("tree contains a cycle".into()));
            }
            seen[v] = true;
            preorder.push(v);
            for &c in &children[v] {
                depth[c] = depth[v] + edge[c];
                stack.push(c);
            }
        }
        if preorder.len() != n {
            return Err(LfmError::Tree(
                "tree is not connected to the root".into(),
            ));
        }

        let p = objects.iter().filter(|o| o.is_some()).count();
        let mut leaf_node = vec![usize::MAX; p];
        for v in 0..n {
            let is_leaf = children[v].is_empty();
            match (is_leaf, objects[v]) {
                (true, Some(j)) => {
                    if j >= p || leaf_node[j] != usize::MAX {
                        return Err(LfmError::Tree(format!(
                            "leaf labels must be 1..{p} with no repeats (bad label {})",
                            j + 1
                        )));
                    }
                    leaf_node[j] = v;
                }
                (true, None) => {
                    return Err(LfmError::Tree(format!("leaf node {v} has no object label")))
                }
                (false, Some(j)) => {
                    return Err(LfmError::Tree(format!(
                        "object {} is attached to an internal node",
                        j + 1
                    )))
                }
                (false, None) => {}
            }
        }
        if v_is_leaf(&children, root) {
            return Err(LfmError::Tree("tree must have at least one edge".into()));
        }
        for (j, &v) in leaf_node.iter().enumerate() {
            if (depth[v] - 1.0).abs() > DEPTH_TOLERANCE {
                return Err(LfmError::Tree(format!(
                    "root-to-leaf length for object {} is {}, expected 1",
                    j + 1,
                    depth[v]
                )));
            }
        }

        let total_length = edge.iter().sum();
        let eta_min = leaf_node
            .iter()
            .map(|&v| edge[v])
            .fold(f64::INFINITY, f64::min);
        let mut postorder = preorder;
        postorder.reverse();
        let edge = edge
            .into_iter()
            .enumerate()
            .map(|(v, t)| if v == root { 0.0 } else { t })
            .collect();
        Ok(Self {
            parent,
            edge,
            children,
            object: objects,
            leaf_node,
            postorder,
            root,
            total_length,
            eta_min,
        })
    }

    /// The star tree: p leaves hanging off the root on unit edges. The
    /// phylogenetic IBP on this tree is the ordinary IBP.
    pub fn star(p: usize) -> Result<Self> {
        let mut parent = vec![None];
        let mut edge = vec![0.0];
        let mut objects = vec![None];
        for j in 0..p {
            parent.push(Some(0));
            edge.push(1.0);
            objects.push(Some(j));
        }
        Self::from_parents(parent, edge, objects)
    }

    /// Parses a Newick string such as `((1:0.5,2:0.5):0.5,3:1);`. Leaf labels
    /// are the 1-based object indices; every non-root edge needs a length.
    pub fn parse_newick(text: &str) -> Result<Self> {
        NewickParser::new(text).parse()
    }

    pub fn num_leaves(&self) -> usize {
        self.leaf_node.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.parent.len()
    }

    /// S(𝒯), the sum of all edge lengths.
    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    /// Shortest edge between a leaf and its parent.
    pub fn eta_min(&self) -> f64 {
        self.eta_min
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.parent[v]
    }

    pub fn edge_length(&self, v: usize) -> f64 {
        self.edge[v]
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    pub fn leaf_node(&self, object: usize) -> usize {
        self.leaf_node[object]
    }

    pub fn object_at(&self, v: usize) -> Option<usize> {
        self.object[v]
    }

    pub(crate) fn postorder(&self) -> &[usize] {
        &self.postorder
    }

    pub fn to_newick(&self) -> String {
        let mut out = String::new();
        self.write_newick(self.root, &mut out);
        out.push(';');
        out
    }

    fn write_newick(&self, v: usize, out: &mut String) {
        use std::fmt::Write;
        if let Some(j) = self.object[v] {
            let _ = write!(out, "{}", j + 1);
        } else {
            out.push('(');
            for (i, &c) in self.children[v].iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                self.write_newick(c, out);
            }
            out.push(')');
        }
        if v != self.root {
            let _ = write!(out, ":{}", self.edge[v]);
        }
    }
}

impl fmt::Display for PhyloTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_newick())
    }
}

fn v_is_leaf(children: &[Vec<usize>], v: usize) -> bool {
    children[v].is_empty()
}

struct NewickParser<'a> {
    bytes: &'a [u8],
    pos: usize,
    parent: Vec<Option<usize>>,
    edge: Vec<f64>,
    objects: Vec<Option<usize>>,
}

impl<'a> NewickParser<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            bytes: text.as_bytes(),
            pos: 0,
            parent: Vec::new(),
            edge: Vec::new(),
            objects: Vec::new(),
        }
    }

    fn parse(mut self) -> Result<PhyloTree> {
        let root = self.subtree(None)?;
        self.skip_ws();
        if self.peek() == Some(b':') {
            self.pos += 1;
            let len = self.number()?;
            if len != 0.0 {
                return Err(self.error("root edge length must be zero or absent"));
            }
        }
        self.edge[root] = 0.0;
        self.skip_ws();
        if self.peek() != Some(b';') {
            return Err(self.error("expected ';' at end of tree"));
        }
        self.pos += 1;
        self.skip_ws();
        if self.pos != self.bytes.len() {
            return Err(self.error("trailing characters after ';'"));
        }
        PhyloTree::from_parents(self.parent, self.edge, self.objects)
    }

    fn new_node(&mut self, parent: Option<usize>) -> usize {
        self.parent.push(parent);
        self.edge.push(f64::NAN);
        self.objects.push(None);
        self.parent.len() - 1
    }

    fn subtree(&mut self, parent: Option<usize>) -> Result<usize> {
        self.skip_ws();
        let v = self.new_node(parent);
        if self.peek() == Some(b'(') {
            self.pos += 1;
            loop {
                let child = self.subtree(Some(v))?;
                self.skip_ws();
                if self.peek() != Some(b':') {
                    return Err(self.error("every non-root edge needs a ':length'"));
                }
                self.pos += 1;
                self.edge[child] = self.number()?;
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
            // internal labels are permitted and ignored
            let _ = self.label();
        } else {
            let label = self.label();
            if label.is_empty() {
                return Err(self.error("expected a leaf label"));
            }
            let idx: usize = label
                .parse()
                .map_err(|_| self.error(&format!("leaf label '{label}' is not an object index")))?;
            if idx == 0 {
                return Err(self.error("leaf labels are 1-based"));
            }
            self.objects[v] = Some(idx - 1);
        }
        Ok(v)
    }

    fn label(&mut self) -> String {
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.peek() {
            if matches!(c, b'(' | b')' | b',' | b':' | b';') || c.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned()
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() || matches!(c, b'.' | b'-' | b'+' | b'e' | b'E') {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap_or("");
        text.parse()
            .map_err(|_| self.error(&format!("invalid branch length '{text}'")))
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn error(&self, msg: &str) -> LfmError {
        LfmError::Tree(format!("{msg} (at byte {})", self.pos))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn star_tree_totals() {
        let t = PhyloTree::star(5).unwrap();
        assert_eq!(t.num_leaves(), 5);
        assert_eq!(t.total_length(), 5.0);
        assert_eq!(t.eta_min(), 1.0);
    }

    #[test]
    fn parses_two_level_tree() {
        let t = PhyloTree::parse_newick("((1:0.4,2:0.4):0.6,3:1.0);").unwrap();
        assert_eq!(t.num_leaves(), 3);
        assert!((t.total_length() - 2.4).abs() < 1e-12);
        assert!((t.eta_min() - 0.4).abs() < 1e-12);
        let again = PhyloTree::parse_newick(&t.to_newick()).unwrap();
        assert_eq!(again.total_length(), t.total_length());
    }

    #[test]
    fn whitespace_and_internal_labels() {
        let t = PhyloTree::parse_newick(" ( (2 : 0.5 , 1:0.5)anc : 0.5 , 3:1 ) root ;\n").unwrap();
        assert_eq!(t.num_leaves(), 3);
        assert_eq!(t.leaf_node(0), 3);
    }

    #[test]
    fn rejects_bad_depth() {
        let err = PhyloTree::parse_newick("((1:0.5,2:0.4):0.5,3:1);").unwrap_err();
        assert!(err.to_string().contains("expected 1"), "{err}");
    }

    #[test]
    fn rejects_bad_labels_and_lengths() {
        assert!(PhyloTree::parse_newick("(1:1,1:1);").is_err());
        assert!(PhyloTree::parse_newick("(1:1,3:1);").is_err());
        assert!(PhyloTree::parse_newick("(1:1,2);").is_err());
        assert!(PhyloTree::parse_newick("(1:1,2:0);").is_err());
        assert!(PhyloTree::parse_newick("(1:1,x:1);").is_err());
        assert!(PhyloTree::parse_newick("(1:1,2:1)").is_err());
        assert!(PhyloTree::parse_newick("(1:1,2:1):0.3;").is_err());
    }

    #[test]
    fn rejects_structural_problems() {
        // two roots
        assert!(PhyloTree::from_parents(vec![None, None], vec![0.0, 0.0], vec![Some(0), Some(1)])
            .is_err());
        // cycle 1 <-> 2 detached from root
        assert!(PhyloTree::from_parents(
            vec![None, Some(2), Some(1), Some(0)],
            vec![0.0, 0.5, 0.5, 1.0],
            vec![None, None, None, Some(0)]
        )
        .is_err());
    }
}
