//! MiniLang frontend: lexer, recursive-descent parser and unparser.
//!
//! The grammar:
//!
//! ```text
//! unit     := { funcdecl | vardecl } ;
//! funcdecl := "fn" Ident "(" [ param { "," param } ] ")" block ;
//! param    := type Ident ;
//! type     := "int" | "bool" | "string" | "int" "[" "]" ;
//! block    := "{" { stmt } "}" ;
//! stmt     := vardecl | ifstmt | forstmt | whilestmt | returnstmt | exprstmt | block ;
//! vardecl  := type Ident [ "=" expr ] ";" ;
//! ifstmt   := "if" "(" expr ")" stmt [ "else" stmt ] ;
//! forstmt  := "for" "(" [vardecl-no-semi | assign] ";" expr ";" assignOrIncr ")" stmt ;
//! whilestmt:= "while" "(" expr ")" stmt ;
//! returnstmt:= "return" [ expr ] ";" ;
//! exprstmt := expr ";" ;
//! expr     := precedence-climbed binary over unary/postfix/primary
//! ```
//!
//! Binary operators, loosest first: `||`, `&&`, `== !=`, `< <=`, `+ -`,
//! `* / %`; all left-associative, one `BinaryExpression` node per operator
//! application. Assignment (`Ident = expr`) and pre-increment (`++ Ident`)
//! are primary forms; calls and indexing are postfix.

use crate::ast::{AstNode, Child, NodeKind, Token, TokenKind, Tree};
use crate::error::{Error, Result};

pub const KEYWORDS: &[&str] = &[
    "fn", "int", "bool", "string", "if", "else", "for", "while", "return",
];

const TYPE_KEYWORDS: &[&str] = &["int", "bool", "string"];

/// Every punctuation lexeme the lexer can emit, longest first so masking
/// `==` before `=` (maximal munch) is just "first match wins".
const PUNCT: &[&str] = &[
    "++", "<=", "==", "!=", "&&", "||", "(", ")", "{", "}", "[", "]", ";", ",", "=", "<", "+",
    "-", "*", "/", "%",
];

/// Maximal-munch tokenization of MiniLang source.
pub fn lex(text: &str) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    let mut line = 1;
    let mut col = 1;

    let advance = |i: &mut usize, line: &mut usize, col: &mut usize, c: char| {
        *i += 1;
        if c == '\n' {
            *line += 1;
            *col = 1;
        } else {
            *col += 1;
        }
    };

    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            advance(&mut i, &mut line, &mut col, c);
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                let c = chars[i];
                advance(&mut i, &mut line, &mut col, c);
            }
            let word: String = chars[start..i].iter().collect();
            let kind = if word == "true" || word == "false" {
                TokenKind::BoolLiteral
            } else if KEYWORDS.contains(&word.as_str()) {
                TokenKind::Keyword
            } else {
                TokenKind::Identifier
            };
            tokens.push(Token::new(word, kind));
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                let c = chars[i];
                advance(&mut i, &mut line, &mut col, c);
            }
            tokens.push(Token::new(
                chars[start..i].iter().collect::<String>(),
                TokenKind::IntLiteral,
            ));
            continue;
        }
        if c == '"' {
            let (sline, scol) = (line, col);
            let start = i;
            advance(&mut i, &mut line, &mut col, c);
            while i < chars.len() && chars[i] != '"' && chars[i] != '\n' {
                let c = chars[i];
                advance(&mut i, &mut line, &mut col, c);
            }
            if i >= chars.len() || chars[i] != '"' {
                return Err(Error::Lex {
                    line: sline,
                    col: scol,
                    msg: "unterminated string literal".to_string(),
                });
            }
            let c = chars[i];
            advance(&mut i, &mut line, &mut col, c);
            tokens.push(Token::new(
                chars[start..i].iter().collect::<String>(),
                TokenKind::StringLiteral,
            ));
            continue;
        }
        let rest: String = chars[i..chars.len().min(i + 2)].iter().collect();
        if let Some(p) = PUNCT.iter().find(|p| rest.starts_with(**p)) {
            for c in p.chars() {
                advance(&mut i, &mut line, &mut col, c);
            }
            tokens.push(Token::punct(*p));
            continue;
        }
        return Err(Error::Lex { line, col, msg: format!("illegal character {c:?}") });
    }
    Ok(tokens)
}

/// Parse MiniLang source into a tree whose leaves equal `lex(text)`.
pub fn parse(text: &str) -> Result<Tree> {
    let tokens = lex(text)?;
    let mut parser = Parser { tokens, pos: 0 };
    let root = parser.compilation_unit()?;
    Ok(Tree::new(root))
}

/// Render a tree as single-space-separated token text.
pub fn unparse(tree: &Tree) -> String {
    let toks = tree.tokens();
    let mut out = String::new();
    for (i, t) in toks.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&t.text);
    }
    out
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn peek2(&self) -> Option<&Token> {
        self.tokens.get(self.pos + 1)
    }

    fn at_text(&self, text: &str) -> bool {
        self.peek().is_some_and(|t| t.text == text)
    }

    fn error(&self, expected: &str) -> Error {
        let found = match self.peek() {
            Some(t) => format!("found {:?}", t.text),
            None => "found end of input".to_string(),
        };
        // Line/column information is not tracked past the lexer; report the
        // token index instead.
        Error::Syntax {
            line: 1,
            col: self.pos + 1,
            msg: format!("expected {expected}, {found} (token {})", self.pos),
        }
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        self.pos += 1;
        t
    }

    fn expect_text(&mut self, text: &str) -> Result<Token> {
        if self.at_text(text) {
            Ok(self.bump())
        } else {
            Err(self.error(&format!("{text:?}")))
        }
    }

    fn expect_ident(&mut self) -> Result<Token> {
        match self.peek() {
            Some(t) if t.kind == TokenKind::Identifier => Ok(self.bump()),
            _ => Err(self.error("an identifier")),
        }
    }

    fn at_type_keyword(&self) -> bool {
        self.peek()
            .is_some_and(|t| t.kind == TokenKind::Keyword && TYPE_KEYWORDS.contains(&t.text.as_str()))
    }

    fn compilation_unit(&mut self) -> Result<AstNode> {
        let mut children = Vec::new();
        while self.peek().is_some() {
            if self.at_text("fn") {
                children.push(Child::Node(self.funcdecl()?));
            } else if self.at_type_keyword() {
                children.push(Child::Node(self.vardecl()?));
            } else {
                return Err(self.error("\"fn\" or a type keyword"));
            }
        }
        Ok(AstNode::new(NodeKind::CompilationUnit, children))
    }

    fn funcdecl(&mut self) -> Result<AstNode> {
        let fn_kw = self.expect_text("fn")?;
        let name = self.expect_ident()?;
        let params = self.param_list()?;
        let body = self.block()?;
        Ok(AstNode::new(
            NodeKind::FunctionDecl,
            vec![
                Child::Token(fn_kw),
                Child::Token(name),
                Child::Node(params),
                Child::Node(body),
            ],
        ))
    }

    fn param_list(&mut self) -> Result<AstNode> {
        let mut children = vec![Child::Token(self.expect_text("(")?)];
        if !self.at_text(")") {
            children.push(Child::Node(self.param()?));
            while self.at_text(",") {
                children.push(Child::Token(self.bump()));
                children.push(Child::Node(self.param()?));
            }
        }
        children.push(Child::Token(self.expect_text(")")?));
        Ok(AstNode::new(NodeKind::ParamList, children))
    }

    fn type_tokens(&mut self) -> Result<Vec<Token>> {
        if !self.at_type_keyword() {
            return Err(self.error("a type keyword"));
        }
        let head = self.bump();
        let mut toks = vec![head];
        if toks[0].text == "int" && self.at_text("[") {
            toks.push(self.bump());
            toks.push(self.expect_text("]")?);
        }
        Ok(toks)
    }

    fn param(&mut self) -> Result<AstNode> {
        let mut children: Vec<Child> = self.type_tokens()?.into_iter().map(Child::Token).collect();
        children.push(Child::Token(self.expect_ident()?));
        Ok(AstNode::new(NodeKind::Param, children))
    }

    fn block(&mut self) -> Result<AstNode> {
        let mut children = vec![Child::Token(self.expect_text("{")?)];
        while !self.at_text("}") {
            if self.peek().is_none() {
                return Err(self.error("a statement or \"}\""));
            }
            children.push(Child::Node(self.stmt()?));
        }
        children.push(Child::Token(self.bump()));
        Ok(AstNode::new(NodeKind::Block, children))
    }

    fn stmt(&mut self) -> Result<AstNode> {
        if self.at_type_keyword() {
            self.vardecl()
        } else if self.at_text("if") {
            self.ifstmt()
        } else if self.at_text("for") {
            self.forstmt()
        } else if self.at_text("while") {
            self.whilestmt()
        } else if self.at_text("return") {
            self.returnstmt()
        } else if self.at_text("{") {
            self.block()
        } else {
            let expr = self.expr()?;
            let semi = self.expect_text(";")?;
            Ok(AstNode::new(
                NodeKind::ExpressionStatement,
                vec![Child::Node(expr), Child::Token(semi)],
            ))
        }
    }

    /// `vardecl` with the trailing semicolon; `decl_core` is shared with the
    /// for-initializer form, which omits it.
    fn vardecl(&mut self) -> Result<AstNode> {
        let mut children = self.decl_core()?;
        children.push(Child::Token(self.expect_text(";")?));
        Ok(AstNode::new(NodeKind::VarDecl, children))
    }

    fn decl_core(&mut self) -> Result<Vec<Child>> {
        let mut children: Vec<Child> = self.type_tokens()?.into_iter().map(Child::Token).collect();
        children.push(Child::Token(self.expect_ident()?));
        if self.at_text("=") {
            let eq = self.bump();
            let value = self.expr()?;
            children.push(Child::Node(AstNode::new(
                NodeKind::EqualsValueClause,
                vec![Child::Token(eq), Child::Node(value)],
            )));
        }
        Ok(children)
    }

    fn ifstmt(&mut self) -> Result<AstNode> {
        let mut children = vec![
            Child::Token(self.expect_text("if")?),
            Child::Token(self.expect_text("(")?),
            Child::Node(self.expr()?),
            Child::Token(self.expect_text(")")?),
            Child::Node(self.stmt()?),
        ];
        if self.at_text("else") {
            children.push(Child::Token(self.bump()));
            children.push(Child::Node(self.stmt()?));
        }
        Ok(AstNode::new(NodeKind::IfStatement, children))
    }

    fn forstmt(&mut self) -> Result<AstNode> {
        let mut children = vec![
            Child::Token(self.expect_text("for")?),
            Child::Token(self.expect_text("(")?),
        ];
        if !self.at_text(";") {
            if self.at_type_keyword() {
                children.push(Child::Node(AstNode::new(NodeKind::ForInitDecl, self.decl_core()?)));
            } else {
                children.push(Child::Node(self.assign_expr()?));
            }
        }
        children.push(Child::Token(self.expect_text(";")?));
        children.push(Child::Node(self.expr()?));
        children.push(Child::Token(self.expect_text(";")?));
        if self.at_text("++") {
            children.push(Child::Node(self.preincrement()?));
        } else {
            children.push(Child::Node(self.assign_expr()?));
        }
        children.push(Child::Token(self.expect_text(")")?));
        children.push(Child::Node(self.stmt()?));
        Ok(AstNode::new(NodeKind::ForStatement, children))
    }

    fn whilestmt(&mut self) -> Result<AstNode> {
        Ok(AstNode::new(
            NodeKind::WhileStatement,
            vec![
                Child::Token(self.expect_text("while")?),
                Child::Token(self.expect_text("(")?),
                Child::Node(self.expr()?),
                Child::Token(self.expect_text(")")?),
                Child::Node(self.stmt()?),
            ],
        ))
    }

    fn returnstmt(&mut self) -> Result<AstNode> {
        let ret = self.expect_text("return")?;
        let mut children = vec![Child::Token(ret)];
        if !self.at_text(";") {
            children.push(Child::Node(self.expr()?));
        }
        children.push(Child::Token(self.expect_text(";")?));
        Ok(AstNode::new(NodeKind::ReturnStatement, children))
    }

    fn assign_expr(&mut self) -> Result<AstNode> {
        let target = self.expect_ident()?;
        let target = AstNode::new(NodeKind::IdentifierName, vec![Child::Token(target)]);
        let eq = self.expect_text("=")?;
        let value = self.expr()?;
        Ok(AstNode::new(
            NodeKind::AssignExpression,
            vec![Child::Node(target), Child::Token(eq), Child::Node(value)],
        ))
    }

    fn preincrement(&mut self) -> Result<AstNode> {
        let op = self.expect_text("++")?;
        let target = self.expect_ident()?;
        Ok(AstNode::new(
            NodeKind::PreIncrementExpression,
            vec![
                Child::Token(op),
                Child::Node(AstNode::new(NodeKind::IdentifierName, vec![Child::Token(target)])),
            ],
        ))
    }

    fn expr(&mut self) -> Result<AstNode> {
        self.binary_expr(0)
    }

    fn binary_level(op: &str) -> Option<u8> {
        Some(match op {
            "||" => 0,
            "&&" => 1,
            "==" | "!=" => 2,
            "<" | "<=" => 3,
            "+" | "-" => 4,
            "*" | "/" | "%" => 5,
            _ => return None,
        })
    }

    fn binary_expr(&mut self, min_level: u8) -> Result<AstNode> {
        let mut lhs = self.postfix_expr()?;
        while let Some(tok) = self.peek() {
            let Some(level) = Self::binary_level(&tok.text) else { break };
            if tok.kind != TokenKind::Punctuation || level < min_level {
                break;
            }
            let op = self.bump();
            let rhs = self.binary_expr(level + 1)?;
            lhs = AstNode::new(
                NodeKind::BinaryExpression,
                vec![Child::Node(lhs), Child::Token(op), Child::Node(rhs)],
            );
        }
        Ok(lhs)
    }

    fn postfix_expr(&mut self) -> Result<AstNode> {
        let mut expr = self.primary()?;
        while self.at_text("[") {
            let open = self.bump();
            let index = self.expr()?;
            let close = self.expect_text("]")?;
            expr = AstNode::new(
                NodeKind::IndexExpression,
                vec![
                    Child::Node(expr),
                    Child::Token(open),
                    Child::Node(index),
                    Child::Token(close),
                ],
            );
        }
        Ok(expr)
    }

    fn primary(&mut self) -> Result<AstNode> {
        let Some(tok) = self.peek() else {
            return Err(self.error("an expression"));
        };
        match tok.kind {
            TokenKind::IntLiteral | TokenKind::StringLiteral | TokenKind::BoolLiteral => {
                Ok(AstNode::new(NodeKind::Literal, vec![Child::Token(self.bump())]))
            }
            TokenKind::Punctuation if tok.text == "(" => {
                let open = self.bump();
                let inner = self.expr()?;
                let close = self.expect_text(")")?;
                Ok(AstNode::new(
                    NodeKind::ParenExpression,
                    vec![Child::Token(open), Child::Node(inner), Child::Token(close)],
                ))
            }
            TokenKind::Punctuation if tok.text == "++" => self.preincrement(),
            TokenKind::Identifier => {
                if self.peek2().is_some_and(|t| t.text == "(") {
                    self.call_expr()
                } else if self.peek2().is_some_and(|t| t.text == "=") {
                    self.assign_expr()
                } else {
                    let name = self.bump();
                    Ok(AstNode::new(NodeKind::IdentifierName, vec![Child::Token(name)]))
                }
            }
            _ => Err(self.error("an expression")),
        }
    }

    fn call_expr(&mut self) -> Result<AstNode> {
        let callee = self.expect_ident()?;
        let callee = AstNode::new(NodeKind::IdentifierName, vec![Child::Token(callee)]);
        let mut children = vec![Child::Node(callee), Child::Token(self.expect_text("(")?)];
        if !self.at_text(")") {
            children.push(Child::Node(self.expr()?));
            while self.at_text(",") {
                children.push(Child::Token(self.bump()));
                children.push(Child::Node(self.expr()?));
            }
        }
        children.push(Child::Token(self.expect_text(")")?));
        Ok(AstNode::new(NodeKind::CallExpression, children))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::depth_first_productions;

    #[test]
    fn lex_empty_is_empty() {
        assert!(lex("").unwrap().is_empty());
    }

    #[test]
    fn lex_for_header_fragment() {
        // Hand application of the lexer rules.
        let toks = lex("for(int i=0;").unwrap();
        let texts: Vec<&str> = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, vec!["for", "(", "int", "i", "=", "0", ";"]);
        let kinds: Vec<TokenKind> = toks.iter().map(|t| t.kind).collect();
        assert_eq!(
            kinds,
            vec![
                TokenKind::Keyword,
                TokenKind::Punctuation,
                TokenKind::Keyword,
                TokenKind::Identifier,
                TokenKind::Punctuation,
                TokenKind::IntLiteral,
                TokenKind::Punctuation,
            ]
        );
    }

    #[test]
    fn lex_illegal_character_reports_position() {
        let err = lex("int x@;").unwrap_err();
        match err {
            Error::Lex { line, col, .. } => {
                assert_eq!(line, 1);
                assert_eq!(col, 6);
            }
            other => panic!("expected lex error, got {other:?}"),
        }
    }

    #[test]
    fn lex_maximal_munch() {
        let texts: Vec<String> =
            lex("++i<=j==k!=l&&m||n").unwrap().into_iter().map(|t| t.text).collect();
        assert_eq!(texts, vec!["++", "i", "<=", "j", "==", "k", "!=", "l", "&&", "m", "||", "n"]);
    }

    #[test]
    fn parse_fn_main() {
        // Grammar derivation: unit -> funcdecl -> "fn" Ident "(" ")" block.
        let tree = parse("fn main() { }").unwrap();
        assert_eq!(tree.root.kind, NodeKind::CompilationUnit);
        let f = tree.root.children[0].as_node().unwrap();
        assert_eq!(f.kind, NodeKind::FunctionDecl);
        assert_eq!(f.children.len(), 4);
        assert_eq!(f.children[0].as_token().unwrap().text, "fn");
        assert_eq!(f.children[1].as_token().unwrap().text, "main");
        assert_eq!(f.children[2].as_node().unwrap().kind, NodeKind::ParamList);
        assert_eq!(f.children[3].as_node().unwrap().kind, NodeKind::Block);
    }

    #[test]
    fn parse_single_param() {
        let tree = parse("fn f(int a) { return a; }").unwrap();
        let f = tree.root.children[0].as_node().unwrap();
        let params = f.children[2].as_node().unwrap();
        let inner: Vec<&AstNode> = params.children.iter().filter_map(|c| c.as_node()).collect();
        assert_eq!(inner.len(), 1);
        assert_eq!(inner[0].kind, NodeKind::Param);
        assert_eq!(inner[0].children[0].as_token().unwrap().text, "int");
        assert_eq!(inner[0].children[1].as_token().unwrap().text, "a");
    }

    #[test]
    fn parse_error_on_unparsable_prefix() {
        assert!(matches!(parse("fn f( {"), Err(Error::Syntax { .. })));
    }

    #[test]
    fn production_order_of_smallest_function() {
        let tree = parse("fn f(){return 0;}").unwrap();
        let kinds: Vec<NodeKind> =
            depth_first_productions(&tree).unwrap().iter().map(|p| p.parent.kind).collect();
        assert_eq!(
            kinds,
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
    fn unparse_is_idempotent_under_reparse() {
        let src = "fn main ( ) { }";
        let t1 = parse(src).unwrap();
        let text = unparse(&t1);
        assert_eq!(text, src);
        assert_eq!(parse(&text).unwrap(), t1);
    }

    #[test]
    fn unparse_empty_block() {
        let tree = parse("fn f() {}").unwrap();
        let f = tree.root.children[0].as_node().unwrap();
        let block = f.children[3].as_node().unwrap();
        let block_tree = Tree::new(block.clone());
        assert_eq!(unparse(&block_tree), "{ }");
    }

    #[test]
    fn leaf_order_equals_lex() {
        let src = "fn f(int a) { for (int i = 0; i < a; ++i) { a = a + i; } return a; }";
        let tree = parse(src).unwrap();
        let leaves: Vec<String> = tree.tokens().iter().map(|t| t.text.clone()).collect();
        let lexed: Vec<String> = lex(src).unwrap().into_iter().map(|t| t.text).collect();
        assert_eq!(leaves, lexed);
    }

    #[test]
    fn round_trip_statement_forms() {
        let src = "int g = 10; \
                   fn f(int a, int[] xs) { \
                     if (a < 10) { a = a + 1; } else { a = 0; } \
                     while (a < g) { ++a; } \
                     for (int i = 0; i < 4; i = i + 1) a = f(a, xs) + xs[i]; \
                     string s = \"hi\"; \
                     bool ok = true; \
                     if ((a + 1) * 2 == g % 3) return a; \
                     return xs[a - 1]; \
                   }";
        let t1 = parse(src).unwrap();
        let t2 = parse(&unparse(&t1)).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn precedence_shapes() {
        // a + b * c parses as a + (b * c)
        let tree = parse("fn f() { int x = a + b * c; }").unwrap();
        let f = tree.root.children[0].as_node().unwrap();
        let block = f.children[3].as_node().unwrap();
        let decl = block.children[1].as_node().unwrap();
        let evc = decl.children.iter().filter_map(|c| c.as_node()).next().unwrap();
        let top = evc.children[1].as_node().unwrap();
        assert_eq!(top.kind, NodeKind::BinaryExpression);
        assert_eq!(top.children[1].as_token().unwrap().text, "+");
        let rhs = top.children[2].as_node().unwrap();
        assert_eq!(rhs.children[1].as_token().unwrap().text, "*");
    }
}
