use permfl_core::compress::Prg;
use permfl_core::sched::graph::{Task, TaskKind, SOURCE};
use permfl_core::sched::{
    build_task_graph, export_dot, refine_schedule, run_scenario, schedule_cpm, ResourceModel,
    SchedAlgorithm, Scenario, TaskGraph,
};

/// Random DAG with `m` real tasks; edges follow a hidden random ranking so
/// insertion order says nothing about topological order.
fn random_dag(prg: &mut Prg, m: usize) -> (TaskGraph, Vec<f64>) {
    let mut g = TaskGraph::new();
    for _ in 0..m {
        // Whole seconds keep every path sum exact, whatever the summation order.
        let secs = prg.below(1000) as f64;
        g.add_task(Task::fixed(TaskKind::Compute, secs));
    }
    let mut rank: Vec<usize> = (0..m).collect();
    prg.shuffle(&mut rank);
    for a in 0..m {
        for b in 0..m {
            if rank[a] < rank[b] && prg.below(100) < 35 {
                g.add_dependency(a + 2, b + 2);
            }
        }
    }
    let d = g.tasks().iter().map(|t| t.work).collect();
    (g, d)
}

/// Every source-to-`v` path, enumerated explicitly.
fn all_path_lengths(g: &TaskGraph, d: &[f64], v: usize, acc: f64, out: &mut Vec<f64>) {
    if v == SOURCE {
        out.push(acc);
        return;
    }
    for e in g.edges().iter().filter(|e| e.to == v) {
        all_path_lengths(g, d, e.from, acc + g.edge_weight(e, d), out);
    }
}

#[test]
fn cpm_equals_brute_force_on_random_dags() {
    let mut prg = Prg::new(2024);
    for trial in 0..1000 {
        let m = prg.below(11) as usize;
        let (g, d) = random_dag(&mut prg, m);
        let s = schedule_cpm(&g, &d).unwrap();
        assert!(s.respects_precedence(&g));
        for v in 0..g.len() {
            let mut paths = Vec::new();
            all_path_lengths(&g, &d, v, 0.0, &mut paths);
            let best = paths.into_iter().fold(0.0, f64::max);
            assert_eq!(s.start[v], best, "trial {trial}, vertex {v}");
        }
    }
}

// A checker for the DOT language grammar (graph, stmt_list, node, edge and
// attribute statements, IDs as names, numerals or quoted strings).
mod dot_grammar {
    #[derive(Debug, Clone, PartialEq)]
    enum Tok {
        Id(String),
        LBrace,
        RBrace,
        LBracket,
        RBracket,
        Eq,
        Semi,
        Comma,
        Arrow,
        Line,
        Colon,
    }

    fn lex(src: &str) -> Result<Vec<Tok>, String> {
        let c: Vec<char> = src.chars().collect();
        let mut i = 0;
        let mut out = Vec::new();
        while i < c.len() {
            let ch = c[i];
            match ch {
                _ if ch.is_whitespace() => i += 1,
                '{' => { out.push(Tok::LBrace); i += 1; }
                '}' => { out.push(Tok::RBrace); i += 1; }
                '[' => { out.push(Tok::LBracket); i += 1; }
                ']' => { out.push(Tok::RBracket); i += 1; }
                '=' => { out.push(Tok::Eq); i += 1; }
                ';' => { out.push(Tok::Semi); i += 1; }
                ',' => { out.push(Tok::Comma); i += 1; }
                ':' => { out.push(Tok::Colon); i += 1; }
                '-' if c.get(i + 1) == Some(&'>') => { out.push(Tok::Arrow); i += 2; }
                '-' if c.get(i + 1) == Some(&'-') => { out.push(Tok::Line); i += 2; }
                '"' => {
                    let mut s = String::new();
                    i += 1;
                    loop {
                        match c.get(i) {
                            None => return Err("unterminated string".into()),
                            Some('\\') => {
                                s.push('\\');
                                s.push(*c.get(i + 1).ok_or("dangling escape")?);
                                i += 2;
                            }
                            Some('"') => { i += 1; break; }
                            Some(&x) => { s.push(x); i += 1; }
                        }
                    }
                    out.push(Tok::Id(s));
                }
                _ if ch.is_ascii_digit() || ch == '.' || ch == '-' => {
                    let start = i;
                    if ch == '-' { i += 1; }
                    let mut dots = 0;
                    while i < c.len() && (c[i].is_ascii_digit() || c[i] == '.') {
                        dots += usize::from(c[i] == '.');
                        i += 1;
                    }
                    if dots > 1 || i == start + usize::from(ch == '-') {
                        return Err(format!("bad numeral at {start}"));
                    }
                    out.push(Tok::Id(c[start..i].iter().collect()));
                }
                _ if ch.is_ascii_alphabetic() || ch == '_' => {
                    let start = i;
                    while i < c.len() && (c[i].is_ascii_alphanumeric() || c[i] == '_') {
                        i += 1;
                    }
                    out.push(Tok::Id(c[start..i].iter().collect()));
                }
                _ => return Err(format!("unexpected character {ch:?}")),
            }
        }
        Ok(out)
    }

    struct P {
        t: Vec<Tok>,
        i: usize,
        directed: bool,
    }

    impl P {
        fn peek(&self) -> Option<&Tok> {
            self.t.get(self.i)
        }
        fn eat(&mut self, t: &Tok) -> bool {
            if self.peek() == Some(t) {
                self.i += 1;
                true
            } else {
                false
            }
        }
        fn expect(&mut self, t: &Tok) -> Result<(), String> {
            if self.eat(t) { Ok(()) } else { Err(format!("expected {t:?} at token {}", self.i)) }
        }
        fn id(&mut self) -> Result<String, String> {
            match self.peek() {
                Some(Tok::Id(s)) => {
                    let s = s.clone();
                    self.i += 1;
                    Ok(s)
                }
                other => Err(format!("expected ID, found {other:?}")),
            }
        }
        fn is_keyword(s: &str, k: &str) -> bool {
            s.eq_ignore_ascii_case(k)
        }
        fn graph(&mut self) -> Result<(), String> {
            let mut head = self.id()?;
            if Self::is_keyword(&head, "strict") {
                head = self.id()?;
            }
            self.directed = if Self::is_keyword(&head, "digraph") {
                true
            } else if Self::is_keyword(&head, "graph") {
                false
            } else {
                return Err("expected graph or digraph".into());
            };
            if matches!(self.peek(), Some(Tok::Id(_))) {
                self.id()?;
            }
            self.expect(&Tok::LBrace)?;
            self.stmt_list()?;
            self.expect(&Tok::RBrace)?;
            if self.i != self.t.len() {
                return Err("trailing tokens".into());
            }
            Ok(())
        }
        fn stmt_list(&mut self) -> Result<(), String> {
            while !matches!(self.peek(), Some(Tok::RBrace) | None) {
                self.stmt()?;
                self.eat(&Tok::Semi);
            }
            Ok(())
        }
        fn stmt(&mut self) -> Result<(), String> {
            let first = self.id()?;
            if ["graph", "node", "edge"].iter().any(|k| Self::is_keyword(&first, k)) {
                return self.attr_list(true);
            }
            if self.eat(&Tok::Eq) {
                self.id()?;
                return Ok(());
            }
            self.port()?;
            let op = if self.directed { Tok::Arrow } else { Tok::Line };
            let wrong = if self.directed { Tok::Line } else { Tok::Arrow };
            if self.peek() == Some(&wrong) {
                return Err("edge operator does not match graph type".into());
            }
            while self.eat(&op) {
                self.id()?;
                self.port()?;
            }
            self.attr_list(false)
        }
        fn port(&mut self) -> Result<(), String> {
            if self.eat(&Tok::Colon) {
                self.id()?;
                if self.eat(&Tok::Colon) {
                    self.id()?;
                }
            }
            Ok(())
        }
        fn attr_list(&mut self, required: bool) -> Result<(), String> {
            if required {
                self.expect(&Tok::LBracket)?;
            } else if !self.eat(&Tok::LBracket) {
                return Ok(());
            }
            loop {
                while !self.eat(&Tok::RBracket) {
                    self.id()?;
                    self.expect(&Tok::Eq)?;
                    self.id()?;
                    if !self.eat(&Tok::Comma) {
                        self.eat(&Tok::Semi);
                    }
                }
                if !self.eat(&Tok::LBracket) {
                    return Ok(());
                }
            }
        }
    }

    pub fn check(src: &str) -> Result<(), String> {
        let mut p = P { t: lex(src)?, i: 0, directed: false };
        p.graph()
    }
}

#[test]
fn dot_checker_rejects_malformed_text() {
    assert!(dot_grammar::check("digraph g { a -> b [label=\"x\"]; }").is_ok());
    assert!(dot_grammar::check("digraph g { a -- b; }").is_err());
    assert!(dot_grammar::check("digraph g { a -> ; }").is_err());
    assert!(dot_grammar::check("digraph g { a [label=\"x] }").is_err());
    assert!(dot_grammar::check("digraph g { a -> b ").is_err());
}

#[test]
fn exported_dot_parses() {
    let empty = TaskGraph::new();
    let s = schedule_cpm(&empty, &[0.0, 0.0]).unwrap();
    let text = export_dot(&empty, &s);
    dot_grammar::check(&text).unwrap();
    assert_eq!(text.matches("fillcolor").count(), 2);

    let mut prg = Prg::new(5);
    for _ in 0..50 {
        let (g, d) = random_dag(&mut prg, 10);
        dot_grammar::check(&export_dot(&g, &schedule_cpm(&g, &d).unwrap())).unwrap();
    }
    for alg in [SchedAlgorithm::Gd, SchedAlgorithm::DcgdPermkAes] {
        let r = run_scenario(&Scenario::straggler(alg)).unwrap();
        dot_grammar::check(&export_dot(&r.graph, &r.naive)).unwrap();
        dot_grammar::check(&export_dot(&r.graph, &r.refined.schedule)).unwrap();
    }
}

#[test]
fn refinement_trace_is_true_cpm_makespans() {
    let m = ResourceModel::reference();
    let g = build_task_graph(SchedAlgorithm::DcgdPermkAes, 100_000, &[500, 100, 100], 3, &m);
    for iters in 1..6 {
        let r = refine_schedule(&g, &m, iters, 1e-12).unwrap();
        assert_eq!(r.makespans.len(), iters + 1);
        let again = schedule_cpm(&g, &r.schedule.duration).unwrap();
        assert_eq!(*r.makespans.last().unwrap(), again.makespan);
        assert!(r.schedule.respects_precedence(&g));
        if iters > 1 {
            let shorter = refine_schedule(&g, &m, iters - 1, 1e-12).unwrap();
            assert_eq!(&r.makespans[..iters], &shorter.makespans[..]);
        }
    }
}
