//! Deterministic MiniLang program generator for the bundled corpus.
//!
//! Programs are drawn from a hand-designed distribution that mimics the
//! regularities of human code the models are built to exploit: statement
//! mixes that shift with nesting depth and enclosing construct, loop
//! headers that reuse their counter token, self-update assignments, and
//! identifier choice that strongly favours recently declared and recently
//! assigned variables of the right type.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ty {
    Int,
    Bool,
    Str,
    IntArr,
}

impl Ty {
    fn name(&self) -> &'static str {
        match self {
            Ty::Int => "int",
            Ty::Bool => "bool",
            Ty::Str => "string",
            Ty::IntArr => "int [ ]",
        }
    }
}

#[derive(Debug, Clone)]
struct Var {
    name: String,
    ty: Ty,
    decl_seq: u64,
    assign_seq: u64,
}

struct Gen {
    rng: ChaCha8Rng,
    scope: Vec<Var>,
    region_marks: Vec<usize>,
    seq: u64,
    local_pool: Vec<&'static str>,
    fn_names: Vec<String>,
    out: Vec<String>,
    depth: usize,
    loop_depth: usize,
    stmt_budget: usize,
}

const GENERAL_NAMES: &[&str] = &[
    "sum", "count", "total", "res", "acc", "len", "val", "x", "y", "z", "a", "b", "c", "tmp",
    "cur", "best", "lo", "hi", "mid", "ans", "pos", "num", "flag", "ok", "left", "right", "size",
    "w", "h", "d", "s", "t", "u", "v", "m", "p", "q", "r", "data", "buf", "arr", "xs", "ys",
    "keys", "vals", "items", "nodes", "edges", "costs", "dist", "seen", "used", "mask", "bits",
    "state", "step", "base", "delta", "limit", "bound", "cap", "score", "rankv", "depth0", "width",
];

const FN_NAMES: &[&str] = &[
    "solve", "main", "helper", "compute", "calc", "init", "update", "check", "process", "run",
    "build", "scan", "countItems", "find", "search", "insert", "removeAt", "mergeRuns", "splitAt",
    "norm", "clamp", "apply", "evalStep", "scoreOf", "rankOf", "fill", "reset", "swap", "rotate",
    "shiftBy", "encode", "decode", "pack", "unpack", "hashOf", "mix", "stepFn", "emit", "probe",
    "reduceAll",
];

const LIB_NAMES: &[&str] = &["print", "len", "abs", "maxOf", "minOf", "readInt", "push", "sqrtOf"];

const GLOBAL_NAMES: &[&str] = &["limit", "capv", "basev", "offset", "scale", "total0", "seed0"];

const BOUNDS: &[&str] = &["2", "3", "4", "5", "8", "10", "16", "20", "32", "64", "100", "128", "256", "1000"];
const STRINGS: &[&str] = &["\"\"", "\"x\"", "\"ok\"", "\"#\"", "\"res\"", "\"key\"", "\"val\""];

impl Gen {
    fn new(seed: u64, program_index: u64) -> Gen {
        let mut z = seed
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add(program_index.wrapping_mul(0xBF58476D1CE4E5B9));
        z = (z ^ (z >> 30)).wrapping_mul(0x94D049BB133111EB);
        Gen {
            rng: ChaCha8Rng::seed_from_u64(z),
            scope: Vec::new(),
            region_marks: Vec::new(),
            seq: 0,
            local_pool: Vec::new(),
            fn_names: Vec::new(),
            out: Vec::new(),
            depth: 0,
            loop_depth: 0,
            stmt_budget: 0,
        }
    }

    fn odds(&mut self, p: f64) -> bool {
        self.rng.gen::<f64>() < p
    }

    fn pick<'a, T>(&mut self, weighted: &'a [(T, f64)]) -> &'a T {
        let total: f64 = weighted.iter().map(|(_, w)| w).sum();
        let mut u = self.rng.gen::<f64>() * total;
        for (item, w) in weighted {
            u -= w;
            if u <= 0.0 {
                return item;
            }
        }
        &weighted[weighted.len() - 1].0
    }

    fn pick_flat<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.rng.gen_range(0..items.len())]
    }

    fn push(&mut self, tok: impl Into<String>) {
        self.out.push(tok.into());
    }

    fn push_all(&mut self, toks: &str) {
        for t in toks.split_whitespace() {
            self.out.push(t.to_string());
        }
    }

    // -- scope mirroring ----------------------------------------------------

    fn begin_region(&mut self) {
        self.region_marks.push(self.scope.len());
    }

    fn end_region(&mut self) {
        let mark = self.region_marks.pop().unwrap_or(0);
        self.scope.truncate(mark);
    }

    fn declare(&mut self, name: &str, ty: Ty) {
        self.seq += 1;
        // Shadowing is legal but confusing in a corpus this small; the
        // name pools avoid it instead.
        self.scope.push(Var { name: name.to_string(), ty, decl_seq: self.seq, assign_seq: self.seq });
    }

    fn assign(&mut self, name: &str) {
        self.seq += 1;
        if let Some(v) = self.scope.iter_mut().rev().find(|v| v.name == name) {
            v.assign_seq = self.seq;
        }
    }

    /// Recency-weighted variable choice: geometric decay over the combined
    /// declaration/assignment recency orders, filtered by type.
    fn pick_var(&mut self, ty: Ty) -> Option<String> {
        let matching: Vec<&Var> = self.scope.iter().filter(|v| v.ty == ty).collect();
        if matching.is_empty() {
            return None;
        }
        let mut by_assign: Vec<&&Var> = matching.iter().collect();
        by_assign.sort_by(|a, b| b.assign_seq.cmp(&a.assign_seq));
        let mut by_decl: Vec<&&Var> = matching.iter().collect();
        by_decl.sort_by(|a, b| b.decl_seq.cmp(&a.decl_seq));
        let rho: f64 = 0.55;
        let weights: Vec<(String, f64)> = matching
            .iter()
            .map(|v| {
                let ar = by_assign.iter().position(|x| x.name == v.name).unwrap();
                let dr = by_decl.iter().position(|x| x.name == v.name).unwrap();
                (v.name.clone(), 0.6 * rho.powi(ar as i32) + 0.4 * rho.powi(dr as i32))
            })
            .collect();
        Some(self.pick(&weights).clone())
    }

    fn fresh_local(&mut self, ty: Ty) -> String {
        let base = match ty {
            Ty::Int => *self.pick_flat(&self.local_pool.clone()),
            Ty::Bool => *self.pick_flat(&["flag", "ok", "done", "found"]),
            Ty::Str => *self.pick_flat(&["name", "text", "word", "line"]),
            Ty::IntArr => *self.pick_flat(&["xs", "arr", "data", "vals", "buf"]),
        };
        let mut name = base.to_string();
        if self.scope.iter().any(|v| v.name == name) || self.odds(0.12) {
            name = format!("{base}{}", self.rng.gen_range(2..10));
        }
        while self.scope.iter().any(|v| v.name == name) {
            name = format!("{base}{}", self.rng.gen_range(2..100));
        }
        name
    }

    // -- expressions ---------------------------------------------------------

    fn int_literal_init(&mut self) -> String {
        let bound = (*self.pick_flat(BOUNDS)).to_string();
        self.pick(&[
            ("0".to_string(), 0.55),
            ("1".to_string(), 0.2),
            ("2".to_string(), 0.1),
            (bound, 0.15),
        ])
        .clone()
    }

    fn bound_expr(&mut self) -> Vec<String> {
        if self.odds(0.5) {
            if let Some(v) = self.pick_var(Ty::Int) {
                return vec![v];
            }
        }
        vec![(*self.pick_flat(BOUNDS)).to_string()]
    }

    /// `VAR cmp BOUND` with the compared variable read from scope.
    fn condition(&mut self) {
        if self.odds(0.12) {
            if let Some(flag) = self.pick_var(Ty::Bool) {
                self.push(flag);
                return;
            }
        }
        let lhs = self.pick_var(Ty::Int).unwrap_or_else(|| "0".to_string());
        let cmp = self.pick(&[("<", 0.5), ("<=", 0.15), ("==", 0.2), ("!=", 0.15)]).to_string();
        let rhs = self.bound_expr();
        self.push(lhs);
        self.push(cmp);
        for t in rhs {
            self.push(t);
        }
    }

    fn index_read(&mut self, arr: &str) {
        self.push(arr.to_string());
        self.push("[");
        let idx = self.pick_var(Ty::Int).unwrap_or_else(|| "0".to_string());
        self.push(idx);
        self.push("]");
    }

    fn call_expr(&mut self, allow_args: bool) {
        let name = if self.odds(0.4) && !self.fn_names.is_empty() {
            self.pick_flat(&self.fn_names.clone()).clone()
        } else {
            (*self.pick_flat(LIB_NAMES)).to_string()
        };
        self.push(name);
        self.push("(");
        if allow_args {
            let n_args = *self.pick(&[(0usize, 0.2), (1, 0.5), (2, 0.3)]);
            for i in 0..n_args {
                if i > 0 {
                    self.push(",");
                }
                self.simple_arg();
            }
        }
        self.push(")");
    }

    fn simple_arg(&mut self) {
        if self.odds(0.72) {
            if let Some(v) = self.pick_var(Ty::Int) {
                self.push(v);
                return;
            }
        }
        if self.odds(0.25) {
            if let Some(arr) = self.pick_var(Ty::IntArr) {
                self.index_read(&arr);
                return;
            }
        }
        let lit = self.int_literal_init();
        self.push(lit);
    }

    /// Right-hand side of an int assignment or initializer. `target` biases
    /// toward the self-update shape `t + delta`.
    fn int_rhs(&mut self, target: Option<&str>) {
        enum Form {
            SelfUpdate,
            VarOp,
            Call,
            Index,
            Lit,
        }
        let form = {
            let has_arr = self.scope.iter().any(|v| v.ty == Ty::IntArr);
            let mut options: Vec<(Form, f64)> = Vec::new();
            if let Some(_t) = target {
                options.push((Form::SelfUpdate, 0.52));
            }
            options.push((Form::VarOp, 0.2));
            options.push((Form::Call, 0.12));
            if has_arr {
                options.push((Form::Index, 0.12));
            }
            options.push((Form::Lit, 0.12));
            let total: f64 = options.iter().map(|(_, w)| w).sum();
            let mut u = self.rng.gen::<f64>() * total;
            let mut chosen = Form::Lit;
            for (f, w) in options {
                u -= w;
                if u <= 0.0 {
                    chosen = f;
                    break;
                }
            }
            chosen
        };
        match form {
            Form::SelfUpdate => {
                let t = target.unwrap().to_string();
                self.push(t);
                let op = self.pick(&[("+", 0.62), ("-", 0.14), ("*", 0.18), ("%", 0.06)]).to_string();
                self.push(op);
                if self.odds(0.55) {
                    if let Some(v) = self.pick_var(Ty::Int) {
                        self.push(v);
                        return;
                    }
                }
                let lit = self.pick(&[("1", 0.55), ("2", 0.3), ("3", 0.15)]).to_string();
                self.push(lit);
            }
            Form::VarOp => {
                let a = self.pick_var(Ty::Int).unwrap_or_else(|| "1".to_string());
                self.push(a);
                let op = self.pick(&[("+", 0.5), ("-", 0.2), ("*", 0.2), ("/", 0.1)]).to_string();
                self.push(op);
                let b = self.pick_var(Ty::Int).unwrap_or_else(|| "2".to_string());
                self.push(b);
            }
            Form::Call => self.call_expr(true),
            Form::Index => {
                let arr = self.pick_var(Ty::IntArr).unwrap();
                self.index_read(&arr);
            }
            Form::Lit => {
                let lit = self.int_literal_init();
                self.push(lit);
            }
        }
    }

    // -- statements ----------------------------------------------------------

    fn var_decl(&mut self) {
        let ty = *self.pick(&[(Ty::Int, 0.8), (Ty::Bool, 0.12), (Ty::Str, 0.08)]);
        let name = self.fresh_local(ty);
        self.push_all(ty.name());
        self.push(name.clone());
        self.push("=");
        match ty {
            Ty::Int => {
                if self.odds(0.3) {
                    self.int_rhs(None);
                } else {
                    let lit = self.int_literal_init();
                    self.push(lit);
                }
            }
            Ty::Bool => {
                let lit = if self.odds(0.6) { "true" } else { "false" };
                self.push(lit);
            }
            Ty::Str => {
                let lit = (*self.pick_flat(STRINGS)).to_string();
                self.push(lit);
            }
            Ty::IntArr => unreachable!(),
        }
        self.push(";");
        self.declare(&name, ty);
    }

    fn assign_stmt(&mut self) {
        let Some(target) = self.pick_var(Ty::Int) else {
            self.call_stmt();
            return;
        };
        self.push(target.clone());
        this_assign(self, &target);
        self.push(";");
        self.assign(&target);
    }

    fn call_stmt(&mut self) {
        self.call_expr(true);
        self.push(";");
    }

    fn return_stmt(&mut self) {
        self.push("return");
        if self.odds(0.55) {
            if let Some(v) = self.pick_var(Ty::Int) {
                self.push(v);
                self.push(";");
                return;
            }
        }
        if self.odds(0.5) {
            let lit = self.int_literal_init();
            self.push(lit);
        } else {
            self.int_rhs(None);
        }
        self.push(";");
    }

    fn loop_counter_name(&mut self) -> String {
        let name = match self.loop_depth {
            0 => *self.pick(&[("i", 0.62), ("j", 0.08), ("idx", 0.12), ("k", 0.06), ("t", 0.12)]),
            1 => *self.pick(&[("j", 0.62), ("k", 0.18), ("i2", 0.1), ("u", 0.1)]),
            _ => *self.pick(&[("k", 0.55), ("t2", 0.2), ("v", 0.25)]),
        };
        let mut name = name.to_string();
        while self.scope.iter().any(|v| v.name == name) {
            name.push('x');
        }
        name
    }

    fn for_stmt(&mut self) {
        self.begin_region();
        let var = self.loop_counter_name();
        self.push("for");
        self.push("(");
        self.push("int");
        self.push(var.clone());
        self.push("=");
        let init = self.pick(&[("0", 0.72), ("1", 0.18), ("2", 0.1)]).to_string();
        self.push(init);
        self.declare(&var, Ty::Int);
        self.push(";");
        // Condition reuses the counter: the token window sees it twice.
        self.push(var.clone());
        let cmp = self.pick(&[("<", 0.82), ("<=", 0.18)]).to_string();
        self.push(cmp);
        let bound = self.bound_expr();
        for t in bound {
            self.push(t);
        }
        self.push(";");
        if self.odds(0.6) {
            self.push("++");
            self.push(var.clone());
        } else {
            self.push(var.clone());
            self.push("=");
            self.push(var.clone());
            self.push("+");
            let step = self.pick(&[("1", 0.8), ("2", 0.2)]).to_string();
            self.push(step);
        }
        self.assign(&var);
        self.push(")");
        self.loop_depth += 1;
        self.depth += 1;
        self.block(BodyKind::Loop);
        self.depth -= 1;
        self.loop_depth -= 1;
        self.end_region();
    }

    fn while_stmt(&mut self) {
        self.push("while");
        self.push("(");
        self.condition();
        self.push(")");
        self.depth += 1;
        self.loop_depth += 1;
        self.block(BodyKind::Loop);
        self.loop_depth -= 1;
        self.depth -= 1;
    }

    fn if_stmt(&mut self) {
        self.push("if");
        self.push("(");
        self.condition();
        self.push(")");
        self.depth += 1;
        if self.odds(0.68) {
            self.block(BodyKind::Branch);
        } else {
            self.single_stmt_body();
        }
        if self.odds(0.3) {
            self.push("else");
            if self.odds(0.5) {
                self.block(BodyKind::Branch);
            } else {
                self.single_stmt_body();
            }
        }
        self.depth -= 1;
    }

    fn single_stmt_body(&mut self) {
        if self.odds(0.45) {
            self.return_stmt();
        } else if self.odds(0.7) {
            self.assign_stmt();
        } else {
            self.call_stmt();
        }
    }

    fn statement(&mut self, kind: BodyKind) {
        if self.stmt_budget == 0 {
            self.assign_stmt();
            return;
        }
        self.stmt_budget -= 1;
        // The statement mix shifts with construct and depth: declarations
        // and loops near the top, short updates and branches deeper.
        let deep = self.depth >= 3;
        let w_for = if deep { 0.06 } else { match kind { BodyKind::Func => 0.3, BodyKind::Loop => 0.24, BodyKind::Branch => 0.05 } };
        let w_if = match kind {
            BodyKind::Func => 0.14,
            BodyKind::Loop => 0.22,
            BodyKind::Branch => 0.12,
        };
        let w_while = if deep { 0.02 } else { 0.06 };
        let w_decl = match kind {
            BodyKind::Func => 0.2,
            BodyKind::Loop => 0.1,
            BodyKind::Branch => 0.06,
        };
        let w_assign = match kind {
            BodyKind::Func => 0.16,
            BodyKind::Loop => 0.32,
            BodyKind::Branch => 0.5,
        };
        let w_call = 0.1;
        let w_ret = match kind {
            BodyKind::Func => 0.04,
            BodyKind::Loop => 0.02,
            BodyKind::Branch => 0.15,
        };
        #[derive(Clone, Copy)]
        enum S {
            For,
            If,
            While,
            Decl,
            Assign,
            Call,
            Ret,
        }
        let choice = *self.pick(&[
            (S::For, w_for),
            (S::If, w_if),
            (S::While, w_while),
            (S::Decl, w_decl),
            (S::Assign, w_assign),
            (S::Call, w_call),
            (S::Ret, w_ret),
        ]);
        match choice {
            S::For => self.for_stmt(),
            S::If => self.if_stmt(),
            S::While => self.while_stmt(),
            S::Decl => self.var_decl(),
            S::Assign => self.assign_stmt(),
            S::Call => self.call_stmt(),
            S::Ret => self.return_stmt(),
        }
    }

    fn block(&mut self, kind: BodyKind) {
        self.begin_region();
        self.push("{");
        let n = match kind {
            BodyKind::Func => self.rng.gen_range(2..=5),
            BodyKind::Loop => self.rng.gen_range(1..=3),
            BodyKind::Branch => self.rng.gen_range(1..=2),
        };
        for _ in 0..n {
            self.statement(kind);
        }
        self.push("}");
        self.end_region();
    }

    fn function(&mut self, name: &str) {
        self.begin_region();
        self.push("fn");
        self.push(name.to_string());
        self.push("(");
        let n_params = *self.pick(&[(0usize, 0.22), (1, 0.4), (2, 0.28), (3, 0.1)]);
        for p in 0..n_params {
            if p > 0 {
                self.push(",");
            }
            let ty = *self.pick(&[(Ty::Int, 0.62), (Ty::IntArr, 0.24), (Ty::Bool, 0.08), (Ty::Str, 0.06)]);
            let base = match ty {
                Ty::Int => *self.pick_flat(&["n", "m", "x", "a", "b", "count0", "cap0"]),
                Ty::IntArr => *self.pick_flat(&["xs", "arr", "data", "vals"]),
                Ty::Bool => *self.pick_flat(&["flag", "strict"]),
                Ty::Str => *self.pick_flat(&["name", "text"]),
            };
            let mut pname = base.to_string();
            while self.scope.iter().any(|v| v.name == pname) {
                pname.push('0');
            }
            self.push_all(ty.name());
            self.push(pname.clone());
            self.declare(&pname, ty);
        }
        self.push(")");
        self.depth += 1;
        self.stmt_budget = self.rng.gen_range(6..=14);
        // Function bodies: declarations first, the work, then usually a
        // return.
        self.begin_region();
        self.push("{");
        let n_decls = self.rng.gen_range(1..=3);
        for _ in 0..n_decls {
            self.var_decl();
        }
        let n_main = self.rng.gen_range(1..=3);
        for _ in 0..n_main {
            self.statement(BodyKind::Func);
        }
        if self.odds(0.8) {
            self.return_stmt();
        }
        self.push("}");
        self.end_region();
        self.depth -= 1;
        self.end_region();
    }

    fn program(&mut self) -> String {
        // A per-program slice of the name pool keeps local vocabularies
        // small while the corpus-wide identifier universe stays broad.
        let pool_size = self.rng.gen_range(6..=10);
        let mut pool = Vec::new();
        while pool.len() < pool_size {
            let cand = *self.pick_flat(GENERAL_NAMES);
            if !pool.contains(&cand) {
                pool.push(cand);
            }
        }
        self.local_pool = pool;

        let n_globals = *self.pick(&[(0usize, 0.45), (1, 0.35), (2, 0.2)]);
        for _ in 0..n_globals {
            let mut name = (*self.pick_flat(GLOBAL_NAMES)).to_string();
            while self.scope.iter().any(|v| v.name == name) {
                name.push('x');
            }
            self.push("int");
            self.push(name.clone());
            self.push("=");
            let lit = (*self.pick_flat(BOUNDS)).to_string();
            self.push(lit);
            self.push(";");
            self.declare(&name, Ty::Int);
        }

        let n_funcs = *self.pick(&[(1usize, 0.35), (2, 0.45), (3, 0.2)]);
        let mut names = Vec::new();
        while names.len() < n_funcs {
            let cand = (*self.pick_flat(FN_NAMES)).to_string();
            if !names.contains(&cand) {
                names.push(cand);
            }
        }
        self.fn_names = names.clone();
        for name in &names {
            self.function(name);
        }
        render(&self.out)
    }
}

fn this_assign(g: &mut Gen, target: &str) {
    g.push("=");
    g.int_rhs(Some(target));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BodyKind {
    Func,
    Loop,
    Branch,
}

/// Light line breaking so the files read like source rather than one line.
fn render(tokens: &[String]) -> String {
    let mut out = String::new();
    let mut indent = 0usize;
    let mut line = String::new();
    let mut paren_depth = 0usize;
    for tok in tokens {
        match tok.as_str() {
            "(" => paren_depth += 1,
            ")" => paren_depth = paren_depth.saturating_sub(1),
            _ => {}
        }
        if !line.is_empty() {
            line.push(' ');
        }
        line.push_str(tok);
        let breaks = paren_depth == 0
            && matches!(tok.as_str(), ";" | "{" | "}");
        if breaks {
            if tok == "}" {
                indent = indent.saturating_sub(1);
            }
            out.push_str(&"    ".repeat(indent));
            out.push_str(line.trim_start());
            out.push('\n');
            line.clear();
            if tok == "{" {
                indent += 1;
            }
        }
    }
    if !line.is_empty() {
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Generate `count` programs; each is valid MiniLang (checked by the
/// caller via reparse).
pub fn generate_corpus(seed: u64, count: usize) -> Vec<String> {
    (0..count)
        .map(|i| {
            let mut gen = Gen::new(seed, i as u64);
            gen.program()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ltt_core::minilang::{parse, unparse};

    #[test]
    fn programs_parse_and_round_trip() {
        for (i, src) in generate_corpus(7, 40).iter().enumerate() {
            let tree = parse(src).unwrap_or_else(|e| panic!("program {i} failed to parse: {e}\n{src}"));
            let again = parse(&unparse(&tree)).unwrap();
            assert_eq!(tree, again, "program {i} round trip");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_corpus(7, 5), generate_corpus(7, 5));
        assert_ne!(generate_corpus(7, 5), generate_corpus(8, 5));
    }

    #[test]
    fn corpus_has_reasonable_shape() {
        let programs = generate_corpus(7, 60);
        let mut total_tokens = 0usize;
        for src in &programs {
            let tree = parse(src).unwrap();
            total_tokens += tree.token_count();
        }
        let mean = total_tokens as f64 / programs.len() as f64;
        assert!(mean > 50.0 && mean < 400.0, "mean tokens per program {mean}");
    }
}
