//! Strictly binary constituency trees.
//!
//! Nodes are stored in preorder, so node `k` is labelled `k + 1` in analysis
//! exports and the root is always node 0.

use serde::{Deserialize, Serialize};

use crate::error::{NliError, Result};

/// Token carried by leaves inserted to complete a full binary tree.
pub const PAD_TOKEN: &str = "<pad>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub children: Option<(usize, usize)>,
    pub token: Option<String>,
    /// Leaf inserted as padding; masked out of attention and pooling.
    #[serde(default)]
    pub padding: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseTree {
    nodes: Vec<TreeNode>,
}

/// Nested form used while building; flattened to preorder afterwards.
#[derive(Debug, Clone)]
enum Shape {
    Leaf(String, bool),
    Node(Box<Shape>, Box<Shape>),
}

impl Shape {
    fn flatten(self, nodes: &mut Vec<TreeNode>) -> usize {
        let id = nodes.len();
        match self {
            Shape::Leaf(tok, padding) => nodes.push(TreeNode {
                children: None,
                token: Some(tok),
                padding,
            }),
            Shape::Node(l, r) => {
                nodes.push(TreeNode {
                    children: None,
                    token: None,
                    padding: false,
                });
                let li = l.flatten(nodes);
                let ri = r.flatten(nodes);
                nodes[id].children = Some((li, ri));
            }
        }
        id
    }
}

fn from_shape(shape: Shape) -> ParseTree {
    let mut nodes = Vec::new();
    shape.flatten(&mut nodes);
    ParseTree { nodes }
}

impl ParseTree {
    pub fn leaf(token: impl Into<String>) -> Self {
        from_shape(Shape::Leaf(token.into(), false))
    }

    /// Joins two trees under a new root.
    pub fn join(left: ParseTree, right: ParseTree) -> Self {
        from_shape(Shape::Node(Box::new(left.to_shape(0)), Box::new(right.to_shape(0))))
    }

    fn to_shape(&self, id: usize) -> Shape {
        let n = &self.nodes[id];
        match n.children {
            None => Shape::Leaf(n.token.clone().unwrap_or_default(), n.padding),
            Some((l, r)) => Shape::Node(Box::new(self.to_shape(l)), Box::new(self.to_shape(r))),
        }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes[id].children.is_none()
    }

    /// Leaf node ids in left-to-right order.
    pub fn leaf_ids(&self) -> Vec<usize> {
        // preorder visits leaves left to right
        (0..self.nodes.len()).filter(|&i| self.is_leaf(i)).collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.children.is_none()).count()
    }

    pub fn leaf_tokens(&self) -> Vec<&str> {
        self.leaf_ids()
            .into_iter()
            .map(|i| self.nodes[i].token.as_deref().unwrap_or(""))
            .collect()
    }

    /// Tokens of non-padding leaves.
    pub fn tokens(&self) -> Vec<String> {
        self.leaf_ids()
            .into_iter()
            .filter(|&i| !self.nodes[i].padding)
            .map(|i| self.nodes[i].token.clone().unwrap_or_default())
            .collect()
    }

    /// Per-node validity: false exactly for padding leaves.
    pub fn node_mask(&self) -> Vec<bool> {
        self.nodes.iter().map(|n| !n.padding).collect()
    }

    /// Height of every node: leaves are 0, an internal node is one more than
    /// its taller child. Nodes of equal height can be evaluated together.
    pub fn heights(&self) -> Vec<usize> {
        let mut h = vec![0; self.nodes.len()];
        // children always follow their parent in preorder
        for id in (0..self.nodes.len()).rev() {
            if let Some((l, r)) = self.nodes[id].children {
                h[id] = 1 + h[l].max(h[r]);
            }
        }
        h
    }

    /// Number of levels on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        self.heights()[0] + 1
    }

    /// Checks the strict-binary and node-count invariants.
    pub fn validate(&self) -> Result<()> {
        let leaves = self.leaf_count();
        if self.nodes.len() != 2 * leaves - 1 {
            return Err(NliError::contract(format!(
                "{} nodes for {leaves} leaves is not a strictly binary tree",
                self.nodes.len()
            )));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            match (&n.children, &n.token) {
                (None, Some(_)) | (Some(_), None) => {}
                _ => {
                    return Err(NliError::contract(format!(
                        "node {i} must be a token leaf or a two-child internal node"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Parenthesized form, e.g. `( ( A man ) running )`.
    pub fn to_sexpr(&self) -> String {
        let mut out = String::new();
        self.write_sexpr(0, &mut out);
        out
    }

    fn write_sexpr(&self, id: usize, out: &mut String) {
        match self.nodes[id].children {
            None => out.push_str(self.nodes[id].token.as_deref().unwrap_or("")),
            Some((l, r)) => {
                out.push_str("( ");
                self.write_sexpr(l, out);
                out.push(' ');
                self.write_sexpr(r, out);
                out.push_str(" )");
            }
        }
    }

    /// Analysis label for a node: its preorder number, plus the token for leaves.
    pub fn node_label(&self, id: usize) -> String {
        match &self.nodes[id].token {
            Some(tok) if self.is_leaf(id) => format!("{}:{}", id + 1, tok),
            _ => format!("{}", id + 1),
        }
    }

    /// Removes leaves rejected by `keep`, splicing each orphaned sibling into
    /// its parent's place. Returns `None` if no leaf survives.
    pub fn prune_leaves(&self, keep: impl Fn(&str) -> bool) -> Option<ParseTree> {
        fn go(t: &ParseTree, id: usize, keep: &dyn Fn(&str) -> bool) -> Option<Shape> {
            let n = &t.nodes[id];
            match n.children {
                None => {
                    let tok = n.token.clone().unwrap_or_default();
                    (n.padding || keep(&tok)).then_some(Shape::Leaf(tok, n.padding))
                }
                Some((l, r)) => match (go(t, l, keep), go(t, r, keep)) {
                    (Some(a), Some(b)) => Some(Shape::Node(Box::new(a), Box::new(b))),
                    (Some(a), None) | (None, Some(a)) => Some(a),
                    (None, None) => None,
                },
            }
        }
        go(self, 0, &keep).map(from_shape)
    }

    /// Maps every leaf token through `f`.
    pub fn map_tokens(&self, f: impl Fn(&str) -> String) -> ParseTree {
        let nodes = self
            .nodes
            .iter()
            .map(|n| TreeNode {
                children: n.children,
                token: match (&n.token, n.padding) {
                    (Some(t), false) => Some(f(t)),
                    (t, _) => t.clone(),
                },
                padding: n.padding,
            })
            .collect();
        ParseTree { nodes }
    }
}

/// Parses a binarized parse such as `( ( A man ) running )`.
///
/// Parenthesized groups carry no labels and must contain exactly two
/// subtrees. A single bare token is a one-leaf tree.
pub fn parse_sexpr(text: &str) -> Result<ParseTree> {
    #[derive(Debug)]
    enum Tok<'a> {
        Open(usize),
        Close(usize),
        Word(&'a str),
    }
    let mut toks = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'(' => {
                toks.push(Tok::Open(i));
                i += 1;
            }
            b')' => {
                toks.push(Tok::Close(i));
                i += 1;
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len() && !matches!(bytes[i], b'(' | b')') && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                toks.push(Tok::Word(&text[start..i]));
            }
        }
    }
    if toks.is_empty() {
        return Err(NliError::Parse {
            offset: 0,
            message: "empty input".into(),
        });
    }

    // stack of open groups: (byte offset of '(', children so far)
    let mut stack: Vec<(usize, Vec<Shape>)> = Vec::new();
    let mut done: Option<Shape> = None;
    let token_offset = |t: &Tok| -> usize {
        match t {
            Tok::Open(o) | Tok::Close(o) => *o,
            Tok::Word(w) => w.as_ptr() as usize - text.as_ptr() as usize,
        }
    };
    for tok in &toks {
        if done.is_some() {
            return Err(NliError::Parse {
                offset: token_offset(tok),
                message: "trailing input after complete tree".into(),
            });
        }
        let finished = match tok {
            Tok::Open(o) => {
                stack.push((*o, Vec::new()));
                None
            }
            Tok::Word(w) => Some(Shape::Leaf((*w).to_string(), false)),
            Tok::Close(c) => {
                let (open, mut kids) = stack.pop().ok_or_else(|| NliError::Parse {
                    offset: *c,
                    message: "unbalanced ')'".into(),
                })?;
                if kids.len() != 2 {
                    return Err(NliError::Parse {
                        offset: open,
                        message: format!("internal node has {} children, expected 2", kids.len()),
                    });
                }
                let r = kids.pop().expect("two");
                let l = kids.pop().expect("two");
                Some(Shape::Node(Box::new(l), Box::new(r)))
            }
        };
        if let Some(shape) = finished {
            match stack.last_mut() {
                Some((_, kids)) => kids.push(shape),
                None => done = Some(shape),
            }
        }
    }
    match (done, stack.last()) {
        (Some(shape), None) => Ok(from_shape(shape)),
        (_, Some((open, _))) => Err(NliError::Parse {
            offset: *open,
            message: "unbalanced '(' never closed".into(),
        }),
        (None, None) => Err(NliError::Parse {
            offset: 0,
            message: "empty input".into(),
        }),
    }
}

/// Full binary tree over `tokens`: adjacent nodes are paired level by level,
/// left to right; an unpaired rightmost node is joined with a padding leaf.
pub fn build_full_binary_tree<S: AsRef<str>>(tokens: &[S]) -> Result<ParseTree> {
    if tokens.is_empty() {
        return Err(NliError::contract("full binary tree over an empty sentence"));
    }
    let mut level: Vec<Shape> = tokens
        .iter()
        .map(|t| Shape::Leaf(t.as_ref().to_string(), false))
        .collect();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(left) = it.next() {
            let right = it.next().unwrap_or_else(|| Shape::Leaf(PAD_TOKEN.to_string(), true));
            next.push(Shape::Node(Box::new(left), Box::new(right)));
        }
        level = next;
    }
    Ok(from_shape(level.pop().expect("one root")))
}
