//! Trees, tokens, children tuples and the canonical depth-first production
//! order, plus the line-oriented AST interchange format.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lexical class of a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenKind {
    Identifier,
    Keyword,
    Punctuation,
    IntLiteral,
    StringLiteral,
    BoolLiteral,
}

impl TokenKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TokenKind::Identifier => "Identifier",
            TokenKind::Keyword => "Keyword",
            TokenKind::Punctuation => "Punctuation",
            TokenKind::IntLiteral => "IntLiteral",
            TokenKind::StringLiteral => "StringLiteral",
            TokenKind::BoolLiteral => "BoolLiteral",
        }
    }

    pub fn from_str_name(s: &str) -> Option<TokenKind> {
        Some(match s {
            "Identifier" => TokenKind::Identifier,
            "Keyword" => TokenKind::Keyword,
            "Punctuation" => TokenKind::Punctuation,
            "IntLiteral" => TokenKind::IntLiteral,
            "StringLiteral" => TokenKind::StringLiteral,
            "BoolLiteral" => TokenKind::BoolLiteral,
            _ => return None,
        })
    }
}

/// An atomic lexical element; the leaves of every tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
}

impl Token {
    pub fn new(text: impl Into<String>, kind: TokenKind) -> Token {
        Token { text: text.into(), kind }
    }

    pub fn ident(text: impl Into<String>) -> Token {
        Token::new(text, TokenKind::Identifier)
    }

    pub fn keyword(text: impl Into<String>) -> Token {
        Token::new(text, TokenKind::Keyword)
    }

    pub fn punct(text: impl Into<String>) -> Token {
        Token::new(text, TokenKind::Punctuation)
    }
}

macro_rules! node_kinds {
    ($($variant:ident),+ $(,)?) => {
        /// Internal-node kinds of the MiniLang grammar. A closed set: the
        /// support tables and the default model both assume every kind that
        /// can ever appear is known up front.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum NodeKind {
            $($variant),+
        }

        impl NodeKind {
            pub const ALL: &'static [NodeKind] = &[$(NodeKind::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self {
                    $(NodeKind::$variant => stringify!($variant)),+
                }
            }

            pub fn from_str_name(s: &str) -> Option<NodeKind> {
                match s {
                    $(stringify!($variant) => Some(NodeKind::$variant),)+
                    _ => None,
                }
            }
        }
    };
}

node_kinds! {
    CompilationUnit,
    FunctionDecl,
    ParamList,
    Param,
    Block,
    VarDecl,
    ForInitDecl,
    EqualsValueClause,
    IfStatement,
    ForStatement,
    WhileStatement,
    ReturnStatement,
    ExpressionStatement,
    AssignExpression,
    BinaryExpression,
    PreIncrementExpression,
    CallExpression,
    IndexExpression,
    ParenExpression,
    IdentifierName,
    Literal,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scope annotation attached to `IdentifierName` nodes in scope-aware
/// variants: `local` means the identifier matches a variable currently in
/// scope, `global` means it does not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScopeTag {
    Local,
    Global,
}

impl ScopeTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScopeTag::Local => "local",
            ScopeTag::Global => "global",
        }
    }
}

/// A node kind, possibly carrying a scope annotation. Unannotated kinds and
/// annotated ones are distinct objects everywhere (support tables,
/// embeddings, reports).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AnnotatedKind {
    pub kind: NodeKind,
    pub tag: Option<ScopeTag>,
}

impl AnnotatedKind {
    pub fn plain(kind: NodeKind) -> AnnotatedKind {
        AnnotatedKind { kind, tag: None }
    }

    pub fn tagged(kind: NodeKind, tag: ScopeTag) -> AnnotatedKind {
        AnnotatedKind { kind, tag: Some(tag) }
    }
}

impl fmt::Display for AnnotatedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tag {
            None => write!(f, "{}", self.kind),
            Some(tag) => write!(f, "({}, {})", self.kind, tag.as_str()),
        }
    }
}

/// One element of a children tuple: an internal child is represented by its
/// (possibly annotated) kind, a token child by its kind and text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Symbol {
    Node(AnnotatedKind),
    Token(TokenKind, String),
}

impl Symbol {
    pub fn token(t: &Token) -> Symbol {
        Symbol::Token(t.kind, t.text.clone())
    }

    pub fn is_token(&self) -> bool {
        matches!(self, Symbol::Token(..))
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Node(k) => write!(f, "{k}"),
            Symbol::Token(_, text) => write!(f, "'{text}'"),
        }
    }
}

/// The ordered list of child symbols a parent expands into; the unit the
/// children distributions predict jointly.
pub type TupleKey = Vec<Symbol>;

/// A child of an internal node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Child {
    Node(AstNode),
    Token(Token),
}

impl Child {
    pub fn as_token(&self) -> Option<&Token> {
        match self {
            Child::Token(t) => Some(t),
            Child::Node(_) => None,
        }
    }

    pub fn as_node(&self) -> Option<&AstNode> {
        match self {
            Child::Node(n) => Some(n),
            Child::Token(_) => None,
        }
    }
}

/// An internal node: a kind plus an ordered children tuple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AstNode {
    pub kind: NodeKind,
    pub children: Vec<Child>,
}

impl AstNode {
    pub fn new(kind: NodeKind, children: Vec<Child>) -> AstNode {
        AstNode { kind, children }
    }

    /// The children tuple key of this node (no scope annotations).
    pub fn tuple_key(&self) -> TupleKey {
        self.children
            .iter()
            .map(|c| match c {
                Child::Node(n) => Symbol::Node(AnnotatedKind::plain(n.kind)),
                Child::Token(t) => Symbol::token(t),
            })
            .collect()
    }
}

/// A whole parsed program (or fragment, for conditional sampling).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tree {
    pub root: AstNode,
    token_count: usize,
}

impl Tree {
    pub fn new(root: AstNode) -> Tree {
        let token_count = count_tokens(&root);
        Tree { root, token_count }
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    /// All leaf tokens in depth-first (source) order.
    pub fn tokens(&self) -> Vec<&Token> {
        let mut out = Vec::with_capacity(self.token_count);
        collect_tokens(&self.root, &mut out);
        out
    }
}

fn count_tokens(node: &AstNode) -> usize {
    node.children
        .iter()
        .map(|c| match c {
            Child::Token(_) => 1,
            Child::Node(n) => count_tokens(n),
        })
        .sum()
}

fn collect_tokens<'a>(node: &'a AstNode, out: &mut Vec<&'a Token>) {
    for c in &node.children {
        match c {
            Child::Token(t) => out.push(t),
            Child::Node(n) => collect_tokens(n, out),
        }
    }
}

/// One expansion event: parent kind, children tuple, and the ordinal of the
/// step in depth-first order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Production {
    pub parent: AnnotatedKind,
    pub tuple: TupleKey,
    pub step: usize,
}

/// All productions of `tree` in the order the stack-driven depth-first
/// generator visits internal nodes: a node's production precedes its
/// children's, children expand left to right, and tokens fall in source
/// order.
pub fn depth_first_productions(tree: &Tree) -> Result<Vec<Production>> {
    let mut out = Vec::new();
    walk(&tree.root, "root", &mut out)?;
    Ok(out)
}

fn walk(node: &AstNode, path: &str, out: &mut Vec<Production>) -> Result<()> {
    if node.children.is_empty() {
        return Err(Error::Structure {
            path: path.to_string(),
            msg: format!("internal node {} has an empty children tuple", node.kind),
        });
    }
    out.push(Production {
        parent: AnnotatedKind::plain(node.kind),
        tuple: node.tuple_key(),
        step: out.len(),
    });
    for (i, child) in node.children.iter().enumerate() {
        if let Child::Node(n) = child {
            walk(n, &format!("{path}.children[{i}]"), out)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Interchange format
//
// One tree per line. An internal node is `{"kind": "<NodeKind>", "children":
// [...]}`, a token leaf is `{"token": "<text>", "tokenKind": "<kind>"}`.
// ---------------------------------------------------------------------------

/// Serialize a tree to its single-line interchange document.
pub fn serialize_ast(tree: &Tree) -> String {
    let mut s = String::new();
    write_node(&tree.root, &mut s);
    s
}

fn write_node(node: &AstNode, out: &mut String) {
    out.push_str("{\"kind\":");
    out.push_str(&serde_json::to_string(node.kind.as_str()).unwrap());
    out.push_str(",\"children\":[");
    for (i, c) in node.children.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        match c {
            Child::Node(n) => write_node(n, out),
            Child::Token(t) => {
                out.push_str("{\"token\":");
                out.push_str(&serde_json::to_string(&t.text).unwrap());
                out.push_str(",\"tokenKind\":\"");
                out.push_str(t.kind.as_str());
                out.push_str("\"}");
            }
        }
    }
    out.push_str("]}");
}

/// Parse an interchange document back into a tree. Schema violations name
/// the offending path.
pub fn deserialize_ast(text: &str) -> Result<Tree> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Schema {
        path: "root".to_string(),
        msg: format!("invalid JSON: {e}"),
    })?;
    let root = read_node(&value, "root")?;
    Ok(Tree::new(root))
}

fn schema_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Schema { path: path.to_string(), msg: msg.into() }
}

fn read_node(value: &serde_json::Value, path: &str) -> Result<AstNode> {
    let obj = value
        .as_object()
        .ok_or_else(|| schema_err(path, "expected an object"))?;
    let kind_str = obj
        .get("kind")
        .ok_or_else(|| schema_err(path, "missing \"kind\""))?
        .as_str()
        .ok_or_else(|| schema_err(path, "\"kind\" must be a string"))?;
    let kind = NodeKind::from_str_name(kind_str)
        .ok_or_else(|| schema_err(path, format!("unknown node kind {kind_str:?}")))?;
    let children_val = obj
        .get("children")
        .ok_or_else(|| schema_err(path, "missing \"children\""))?
        .as_array()
        .ok_or_else(|| schema_err(path, "\"children\" must be an array"))?;

    let mut children = Vec::with_capacity(children_val.len());
    for (i, cv) in children_val.iter().enumerate() {
        let cpath = format!("{path}.children[{i}]");
        let cobj = cv
            .as_object()
            .ok_or_else(|| schema_err(&cpath, "expected an object"))?;
        if cobj.contains_key("token") {
            let text = cobj
                .get("token")
                .and_then(|v| v.as_str())
                .ok_or_else(|| schema_err(&cpath, "\"token\" must be a string"))?;
            if text.is_empty() {
                return Err(schema_err(&cpath, "token text must be non-empty"));
            }
            let kind_str = cobj
                .get("tokenKind")
                .ok_or_else(|| schema_err(&cpath, "missing \"tokenKind\""))?
                .as_str()
                .ok_or_else(|| schema_err(&cpath, "\"tokenKind\" must be a string"))?;
            let tkind = TokenKind::from_str_name(kind_str)
                .ok_or_else(|| schema_err(&cpath, format!("unknown token kind {kind_str:?}")))?;
            children.push(Child::Token(Token::new(text, tkind)));
        } else {
            children.push(Child::Node(read_node(cv, &cpath)?));
        }
    }
    Ok(AstNode::new(kind, children))
}

/// Read a `.asts.jsonl` corpus: one serialized tree per line, blank lines
/// skipped.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<Tree>> {
    let mut trees = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tree = deserialize_ast(&line).map_err(|e| match e {
            Error::Schema { path, msg } => Error::Schema {
                path: format!("line {}:{}", lineno + 1, path),
                msg,
            },
            other => other,
        })?;
        trees.push(tree);
    }
    Ok(trees)
}

pub fn read_corpus_file(path: impl AsRef<std::path::Path>) -> Result<Vec<Tree>> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| {
        Error::Data(format!("cannot open corpus {}: {e}", path.as_ref().display()))
    })?;
    read_corpus(std::io::BufReader::new(file))
}

pub fn write_corpus<W: Write>(mut writer: W, trees: &[Tree]) -> Result<()> {
    for tree in trees {
        writeln!(writer, "{}", serialize_ast(tree))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident_name(text: &str) -> AstNode {
        AstNode::new(NodeKind::IdentifierName, vec![Child::Token(Token::ident(text))])
    }

    /// The `= sum` fragment: EqualsValueClause expanding to the equals token
    /// and an identifier use.
    fn equals_value_clause() -> AstNode {
        AstNode::new(
            NodeKind::EqualsValueClause,
            vec![Child::Token(Token::punct("=")), Child::Node(ident_name("sum"))],
        )
    }

    #[test]
    fn equals_value_clause_production() {
        let tree = Tree::new(equals_value_clause());
        let prods = depth_first_productions(&tree).unwrap();
        assert_eq!(prods.len(), 2);
        assert_eq!(prods[0].parent, AnnotatedKind::plain(NodeKind::EqualsValueClause));
        assert_eq!(
            prods[0].tuple,
            vec![
                Symbol::Token(TokenKind::Punctuation, "=".to_string()),
                Symbol::Node(AnnotatedKind::plain(NodeKind::IdentifierName)),
            ]
        );
    }

    #[test]
    fn single_internal_node_yields_one_production() {
        let tree = Tree::new(ident_name("x"));
        let prods = depth_first_productions(&tree).unwrap();
        assert_eq!(prods.len(), 1);
        assert_eq!(prods[0].step, 0);
    }

    #[test]
    fn empty_children_is_a_structural_error() {
        let tree = Tree::new(AstNode::new(NodeKind::Block, vec![]));
        let err = depth_first_productions(&tree).unwrap_err();
        assert!(matches!(err, Error::Structure { .. }));
    }

    /// Production order oracle: an independent recursive enumeration that
    /// collects (kind, subtree) preorder, checked against the walker.
    fn preorder_kinds(node: &AstNode, out: &mut Vec<NodeKind>) {
        out.push(node.kind);
        for c in &node.children {
            if let Child::Node(n) = c {
                preorder_kinds(n, out);
            }
        }
    }

    #[test]
    fn production_order_matches_recursive_enumeration() {
        // fn f(){return 0;}
        let tree = Tree::new(AstNode::new(
            NodeKind::CompilationUnit,
            vec![Child::Node(AstNode::new(
                NodeKind::FunctionDecl,
                vec![
                    Child::Token(Token::keyword("fn")),
                    Child::Token(Token::ident("f")),
                    Child::Node(AstNode::new(
                        NodeKind::ParamList,
                        vec![Child::Token(Token::punct("(")), Child::Token(Token::punct(")"))],
                    )),
                    Child::Node(AstNode::new(
                        NodeKind::Block,
                        vec![
                            Child::Token(Token::punct("{")),
                            Child::Node(AstNode::new(
                                NodeKind::ReturnStatement,
                                vec![
                                    Child::Token(Token::keyword("return")),
                                    Child::Node(AstNode::new(
                                        NodeKind::Literal,
                                        vec![Child::Token(Token::new("0", TokenKind::IntLiteral))],
                                    )),
                                    Child::Token(Token::punct(";")),
                                ],
                            )),
                            Child::Token(Token::punct("}")),
                        ],
                    )),
                ],
            ))],
        ));
        let prods = depth_first_productions(&tree).unwrap();
        let got: Vec<NodeKind> = prods.iter().map(|p| p.parent.kind).collect();
        let mut expected = Vec::new();
        preorder_kinds(&tree.root, &mut expected);
        assert_eq!(got, expected);
        assert_eq!(
            got,
            vec![
                NodeKind::CompilationUnit,
                NodeKind::FunctionDecl,
                NodeKind::ParamList,
                NodeKind::Block,
                NodeKind::ReturnStatement,
                NodeKind::Literal,
            ]
        );
    }

    #[test]
    fn tokens_in_visit_order_match_leaf_order() {
        let tree = Tree::new(equals_value_clause());
        let toks: Vec<&str> = tree.tokens().iter().map(|t| t.text.as_str()).collect();
        assert_eq!(toks, vec!["=", "sum"]);
        assert_eq!(tree.token_count(), 2);
    }

    #[test]
    fn serialization_round_trips() {
        let tree = Tree::new(equals_value_clause());
        let text = serialize_ast(&tree);
        let back = deserialize_ast(&text).unwrap();
        assert_eq!(back, tree);
        assert_eq!(
            depth_first_productions(&back).unwrap(),
            depth_first_productions(&tree).unwrap()
        );
    }

    #[test]
    fn empty_compilation_unit_round_trips() {
        // Structurally representable and serializable, even though it yields
        // no productions.
        let tree = Tree::new(AstNode::new(NodeKind::CompilationUnit, vec![]));
        let text = serialize_ast(&tree);
        assert_eq!(deserialize_ast(&text).unwrap(), tree);
    }

    #[test]
    fn missing_kind_is_a_schema_error_naming_the_path() {
        let doc = r#"{"kind":"Block","children":[{"children":[]}]}"#;
        let err = deserialize_ast(doc).unwrap_err();
        match err {
            Error::Schema { path, msg } => {
                assert_eq!(path, "root.children[0]");
                assert!(msg.contains("kind"), "{msg}");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }
}
