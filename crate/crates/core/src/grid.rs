//! Grid case model: MATPOWER-subset parsing, admittance and DC susceptance assembly.
//!
//! All electrical quantities are stored in per-unit on `base_mva`. Buses are renumbered to
//! contiguous 0-based indices; the original ids stay on [`Bus::id`] for reporting.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;

use faer::Mat;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::Cholesky;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

impl BusKind {
    fn code(self) -> u8 {
        match self {
            BusKind::Pq => 1,
            BusKind::Pv => 2,
            BusKind::Slack => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    /// Original bus number from the case file.
    pub id: usize,
    pub kind: BusKind,
    pub p_load: f64,
    pub q_load: f64,
    /// Shunt conductance / susceptance (pu, injected at V = 1).
    pub g_shunt: f64,
    pub b_shunt: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub v_setpoint: f64,
    pub base_kv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// Internal bus indices.
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
    pub b_charging: f64,
    pub tap_ratio: f64,
    /// Apparent-power limit; `f64::INFINITY` when the case leaves it unrated.
    pub s_max: f64,
}

/// Quadratic cost `c2 p² + c1 p + c0` with `p` in per-unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostCoefficients {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl CostCoefficients {
    pub fn eval(&self, p: f64) -> f64 {
        self.c2 * p * p + self.c1 * p + self.c0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    /// Internal bus index.
    pub bus: usize,
    /// Dispatch listed in the case file, used as the sampling centre.
    pub p_nominal: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub cost: CostCoefficients,
    pub is_slack: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    /// Internal indices of buses carrying stochastic injections.
    pub uncertain_buses: Vec<usize>,
}

impl GridCase {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn slack_bus(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated case has a slack bus")
    }

    pub fn slack_generator(&self) -> usize {
        self.generators
            .iter()
            .position(|g| g.is_slack)
            .expect("validated case has a slack generator")
    }

    /// Indices (into `generators`) of every non-slack generator, in case order.
    pub fn controllable_generators(&self) -> Vec<usize> {
        (0..self.generators.len())
            .filter(|&g| !self.generators[g].is_slack)
            .collect()
    }

    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn pq_buses(&self) -> Vec<usize> {
        (0..self.n_buses())
            .filter(|&i| self.buses[i].kind == BusKind::Pq)
            .collect()
    }

    /// Distinct generator buses in order of first appearance in the generator table.
    pub fn generator_buses(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for g in &self.generators {
            if !out.contains(&g.bus) {
                out.push(g.bus);
            }
        }
        out
    }

    /// Returns a copy with the given original bus ids designated as uncertain.
    pub fn with_uncertain_buses(mut self, ids: &[usize]) -> Result<Self> {
        let mut idx = Vec::with_capacity(ids.len());
        for &id in ids {
            let i = self
                .bus_index(id)
                .ok_or_else(|| Error::InvalidCase(format!("uncertain bus {id} not in case")))?;
            if idx.contains(&i) {
                return Err(Error::InvalidCase(format!("uncertain bus {id} listed twice")));
            }
            idx.push(i);
        }
        self.uncertain_buses = idx;
        Ok(self)
    }

    /// Net active injection per bus at the case's own dispatch (`p_nominal`) with nominal loads.
    pub fn nominal_injections(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.buses.iter().map(|b| -b.p_load).collect();
        for g in &self.generators {
            p[g.bus] += g.p_nominal;
        }
        p
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.n_buses();
        let mut adj = vec![Vec::new(); n];
        for br in &self.branches {
            adj[br.from_bus].push(br.to_bus);
            adj[br.to_bus].push(br.from_bus);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([self.slack_bus()]);
        seen[self.slack_bus()] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        let islanded: Vec<usize> = (0..n).filter(|&i| !seen[i]).map(|i| self.buses[i].id).collect();
        if islanded.is_empty() {
            Ok(())
        } else {
            Err(Error::Connectivity(format!("buses {islanded:?} unreachable from the slack bus")))
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Num(f64),
    Str(String),
    Punct(char),
    Newline,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn lex(text: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    for (li, raw) in text.lines().enumerate() {
        let line = li + 1;
        let chars: Vec<char> = raw.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let column = i + 1;
            match c {
                '%' => break,
                ' ' | '\t' | '\r' => i += 1,
                '=' | '[' | ']' | ';' | ',' => {
                    out.push(Token { tok: Tok::Punct(c), line, column });
                    i += 1;
                }
                '\'' | '"' => {
                    let end = chars[i + 1..]
                        .iter()
                        .position(|&d| d == c)
                        .ok_or_else(|| syntax(line, column, "unterminated string"))?;
                    let s: String = chars[i + 1..i + 1 + end].iter().collect();
                    out.push(Token { tok: Tok::Str(s), line, column });
                    i += end + 2;
                }
                c if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => {
                    let start = i;
                    i += 1;
                    while i < chars.len() {
                        let d = chars[i];
                        let exp_sign = (d == '-' || d == '+') && matches!(chars[i - 1], 'e' | 'E');
                        if d.is_ascii_alphanumeric() || d == '.' || exp_sign {
                            i += 1;
                        } else {
                            break;
                        }
                    }
                    let s: String = chars[start..i].iter().collect();
                    let v = match s.as_str() {
                        "-Inf" => f64::NEG_INFINITY,
                        "+Inf" => f64::INFINITY,
                        _ => s
                            .parse::<f64>()
                            .map_err(|_| syntax(line, column, format!("invalid number '{s}'")))?,
                    };
                    out.push(Token { tok: Tok::Num(v), line, column });
                }
                c if c.is_ascii_alphabetic() || c == '_' => {
                    let start = i;
                    while i < chars.len()
                        && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.')
                    {
                        i += 1;
                    }
                    let s: String = chars[start..i].iter().collect();
                    let tok = match s.as_str() {
                        "Inf" => Tok::Num(f64::INFINITY),
                        "NaN" => return Err(syntax(line, column, "NaN is not allowed")),
                        _ => Tok::Word(s),
                    };
                    out.push(Token { tok, line, column });
                }
                other => return Err(syntax(line, column, format!("unexpected character '{other}'"))),
            }
        }
        out.push(Token {
            tok: Tok::Newline,
            line,
            column: chars.len() + 1,
        });
    }
    Ok(out)
}

#[derive(Debug)]
struct Table {
    rows: Vec<Vec<f64>>,
    /// (line, column) of each row's first entry.
    positions: Vec<(usize, usize)>,
}

#[derive(Debug, Default)]
struct RawCase {
    base_mva: Option<f64>,
    tables: HashMap<String, Table>,
}

fn parse_raw(text: &str) -> Result<RawCase> {
    let toks = lex(text)?;
    let mut raw = RawCase::default();
    let mut i = 0;
    while i < toks.len() {
        match &toks[i].tok {
            Tok::Newline | Tok::Punct(';') => i += 1,
            Tok::Word(w) if w == "function" => {
                while i < toks.len() && toks[i].tok != Tok::Newline {
                    i += 1;
                }
            }
            Tok::Word(w) if w.starts_with("mpc.") => {
                let field = w["mpc.".len()..].to_string();
                let t = &toks[i];
                i += 1;
                match toks.get(i) {
                    Some(Token { tok: Tok::Punct('='), .. }) => i += 1,
                    Some(tk) => return Err(syntax(tk.line, tk.column, "expected '='")),
                    None => return Err(syntax(t.line, t.column, "unexpected end of input")),
                }
                let tk = toks
                    .get(i)
                    .ok_or_else(|| syntax(t.line, t.column, "unexpected end of input"))?;
                match &tk.tok {
                    Tok::Num(v) => {
                        if field == "baseMVA" {
                            raw.base_mva = Some(*v);
                        }
                        i += 1;
                    }
                    Tok::Str(_) => i += 1,
                    Tok::Punct('[') => {
                        let (table, next) = parse_matrix(&toks, i + 1, (tk.line, tk.column))?;
                        raw.tables.insert(field, table);
                        i = next;
                    }
                    _ => return Err(syntax(tk.line, tk.column, "expected a number, string or matrix")),
                }
                match toks.get(i).map(|t| &t.tok) {
                    Some(Tok::Punct(';')) | Some(Tok::Newline) | None => {}
                    Some(_) => {
                        let t = &toks[i];
                        return Err(syntax(t.line, t.column, "expected ';' after assignment"));
                    }
                }
            }
            _ => {
                let t = &toks[i];
                return Err(syntax(t.line, t.column, "expected an 'mpc.<field> = ...' assignment"));
            }
        }
    }
    Ok(raw)
}

fn parse_matrix(toks: &[Token], mut i: usize, open: (usize, usize)) -> Result<(Table, usize)> {
    let mut rows = Vec::new();
    let mut positions = Vec::new();
    let mut cur: Vec<f64> = Vec::new();
    let mut cur_pos = open;
    let mut width: Option<usize> = None;
    let mut flush = |cur: &mut Vec<f64>, pos: (usize, usize), rows: &mut Vec<Vec<f64>>| -> Result<()> {
        if cur.is_empty() {
            return Ok(());
        }
        match width {
            None => width = Some(cur.len()),
            Some(w) if w != cur.len() => {
                return Err(syntax(pos.0, pos.1, format!("row has {} columns, expected {w}", cur.len())))
            }
            _ => {}
        }
        rows.push(std::mem::take(cur));
        positions.push(pos);
        Ok(())
    };
    loop {
        let t = toks
            .get(i)
            .ok_or_else(|| syntax(open.0, open.1, "unterminated matrix"))?;
        match &t.tok {
            Tok::Num(v) => {
                if cur.is_empty() {
                    cur_pos = (t.line, t.column);
                }
                cur.push(*v);
            }
            Tok::Punct(',') => {}
            Tok::Punct(';') | Tok::Newline => flush(&mut cur, cur_pos, &mut rows)?,
            Tok::Punct(']') => {
                flush(&mut cur, cur_pos, &mut rows)?;
                return Ok((Table { rows, positions }, i + 1));
            }
            _ => return Err(syntax(t.line, t.column, "unexpected token inside matrix")),
        }
        i += 1;
    }
}

fn table<'a>(raw: &'a RawCase, name: &'static str, min_cols: usize) -> Result<&'a Table> {
    let t = raw
        .tables
        .get(name)
        .ok_or_else(|| Error::InvalidCase(format!("missing table mpc.{name}")))?;
    if let (Some(r), Some(&(line, column))) = (t.rows.first(), t.positions.first()) {
        if r.len() < min_cols {
            return Err(syntax(
                line,
                column,
                format!("mpc.{name} needs at least {min_cols} columns, found {}", r.len()),
            ));
        }
    }
    Ok(t)
}

fn as_id(v: f64, line: usize, column: usize) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
        Ok(v as usize)
    } else {
        Err(syntax(line, column, format!("expected a non-negative integer id, found {v}")))
    }
}

/// Parse MATPOWER-style case text (bus, gen, branch and gencost tables).
pub fn parse_case(text: &str) -> Result<GridCase> {
    let raw = parse_raw(text)?;
    let base_mva = raw
        .base_mva
        .ok_or_else(|| Error::InvalidCase("missing mpc.baseMVA".into()))?;
    if !(base_mva > 0.0) || !base_mva.is_finite() {
        return Err(Error::InvalidCase(format!("baseMVA must be positive, found {base_mva}")));
    }
    let bus_t = table(&raw, "bus", 13)?;
    let gen_t = table(&raw, "gen", 10)?;
    let branch_t = table(&raw, "branch", 11)?;
    let cost_t = table(&raw, "gencost", 4)?;

    let mut buses = Vec::with_capacity(bus_t.rows.len());
    let mut index: HashMap<usize, usize> = HashMap::new();
    for (r, (row, &(line, column))) in bus_t.rows.iter().zip(&bus_t.positions).enumerate() {
        let id = as_id(row[0], line, column)?;
        if index.insert(id, r).is_some() {
            return Err(Error::InvalidCase(format!("duplicate bus id {id}")));
        }
        let kind = match row[1] as i64 {
            1 => BusKind::Pq,
            2 => BusKind::Pv,
            3 => BusKind::Slack,
            t => return Err(Error::InvalidCase(format!("bus {id}: unsupported bus type {t}"))),
        };
        let bus = Bus {
            id,
            kind,
            p_load: row[2] / base_mva,
            q_load: row[3] / base_mva,
            g_shunt: row[4] / base_mva,
            b_shunt: row[5] / base_mva,
            v_setpoint: row[7],
            base_kv: row[9],
            v_max: row[11],
            v_min: row[12],
        };
        if !(bus.v_min < bus.v_max) {
            return Err(Error::InvalidCase(format!("bus {id}: v_min must be below v_max")));
        }
        if !bus.p_load.is_finite() || !bus.q_load.is_finite() {
            return Err(Error::InvalidCase(format!("bus {id}: non-finite load")));
        }
        buses.push(bus);
    }
    let slacks: Vec<usize> = buses
        .iter()
        .filter(|b| b.kind == BusKind::Slack)
        .map(|b| b.id)
        .collect();
    match slacks.len() {
        0 => return Err(Error::MissingSlack),
        1 => {}
        _ => return Err(Error::MultipleSlack(slacks)),
    }

    if cost_t.rows.len() < gen_t.rows.len() {
        return Err(Error::InvalidCase(format!(
            "gencost has {} rows for {} generators",
            cost_t.rows.len(),
            gen_t.rows.len()
        )));
    }
    let mut generators = Vec::new();
    let mut setpoint_seen = vec![false; buses.len()];
    for (r, (row, &(line, column))) in gen_t.rows.iter().zip(&gen_t.positions).enumerate() {
        let id = as_id(row[0], line, column)?;
        let bus = *index.get(&id).ok_or(Error::DanglingBus {
            table: "gen",
            row: r + 1,
            bus: id,
        })?;
        if row[7] <= 0.0 {
            continue;
        }
        let cost = parse_cost(&cost_t.rows[r], r + 1)?;
        let gen = Generator {
            bus,
            p_nominal: row[1] / base_mva,
            q_max: row[3] / base_mva,
            q_min: row[4] / base_mva,
            p_max: row[8] / base_mva,
            p_min: row[9] / base_mva,
            cost: CostCoefficients {
                c2: cost.0 * base_mva * base_mva,
                c1: cost.1 * base_mva,
                c0: cost.2,
            },
            is_slack: false,
        };
        if !(gen.p_min <= gen.p_max) || !(gen.q_min <= gen.q_max) {
            return Err(Error::InvalidCase(format!("gen row {}: inverted limits", r + 1)));
        }
        if !setpoint_seen[bus] {
            buses[bus].v_setpoint = row[5];
            setpoint_seen[bus] = true;
        }
        generators.push(gen);
    }
    let slack_bus = index[&slacks[0]];
    let slack_gen = generators
        .iter()
        .position(|g| g.bus == slack_bus)
        .ok_or_else(|| Error::InvalidCase("no in-service generator at the slack bus".into()))?;
    generators[slack_gen].is_slack = true;

    let mut branches = Vec::new();
    for (r, row) in branch_t.rows.iter().enumerate() {
        if row[10] == 0.0 {
            continue;
        }
        let (line, column) = branch_t.positions[r];
        let mut ends = [0usize; 2];
        for (k, end) in ends.iter_mut().enumerate() {
            let id = as_id(row[k], line, column)?;
            *end = *index.get(&id).ok_or(Error::DanglingBus {
                table: "branch",
                row: r + 1,
                bus: id,
            })?;
        }
        if ends[0] == ends[1] {
            return Err(Error::InvalidCase(format!("branch row {} is a self-loop", r + 1)));
        }
        if row[3] == 0.0 {
            return Err(Error::ZeroReactance(r + 1));
        }
        let rate = row[5] / base_mva;
        branches.push(Branch {
            from_bus: ends[0],
            to_bus: ends[1],
            r: row[2],
            x: row[3],
            b_charging: row[4],
            tap_ratio: if row[8] == 0.0 { 1.0 } else { row[8] },
            s_max: if rate <= 0.0 { f64::INFINITY } else { rate },
        });
    }

    let case = GridCase {
        base_mva,
        buses,
        branches,
        generators,
        uncertain_buses: Vec::new(),
    };
    case.check_connected()?;
    Ok(case)
}

fn parse_cost(row: &[f64], r: usize) -> Result<(f64, f64, f64)> {
    if row[0] != 2.0 {
        return Err(Error::InvalidCase(format!("gencost row {r}: only polynomial (model 2) costs are supported")));
    }
    let n = row[3] as usize;
    if n > 3 || row.len() < 4 + n {
        return Err(Error::InvalidCase(format!("gencost row {r}: unsupported polynomial of {n} terms")));
    }
    let coeffs = &row[4..4 + n];
    let mut c = [0.0; 3];
    for (k, &v) in coeffs.iter().rev().enumerate() {
        c[k] = v;
    }
    if c[2] < 0.0 {
        return Err(Error::InvalidCase(format!("gencost row {r}: negative quadratic coefficient")));
    }
    Ok((c[2], c[1], c[0]))
}

/// Value `y` near `guess` with `forward(y) == x`, so that re-parsing reproduces `x` bit for bit.
fn invert_exact(x: f64, guess: f64, forward: impl Fn(f64) -> f64) -> f64 {
    if !guess.is_finite() || forward(guess) == x {
        return guess;
    }
    let (mut up, mut down) = (guess, guess);
    for _ in 0..8 {
        up = up.next_up();
        down = down.next_down();
        for y in [up, down] {
            if forward(y) == x {
                return y;
            }
        }
    }
    guess
}

/// Serialize back to the MATPOWER subset read by [`parse_case`].
pub fn write_case(case: &GridCase) -> String {
    let base = case.base_mva;
    let mw = |x: f64| invert_exact(x, x * base, |y| y / base);
    let mut s = String::new();
    let _ = writeln!(s, "function mpc = case");
    let _ = writeln!(s, "mpc.version = '2';");
    let _ = writeln!(s, "mpc.baseMVA = {base};");
    let _ = writeln!(s, "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin");
    let _ = writeln!(s, "mpc.bus = [");
    for b in &case.buses {
        let _ = writeln!(
            s,
            "\t{}\t{}\t{}\t{}\t{}\t{}\t1\t{}\t0\t{}\t1\t{}\t{};",
            b.id,
            b.kind.code(),
            mw(b.p_load),
            mw(b.q_load),
            mw(b.g_shunt),
            mw(b.b_shunt),
            b.v_setpoint,
            b.base_kv,
            b.v_max,
            b.v_min
        );
    }
    let _ = writeln!(s, "];");
    let _ = writeln!(s, "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin");
    let _ = writeln!(s, "mpc.gen = [");
    for g in &case.generators {
        let bus = &case.buses[g.bus];
        let _ = writeln!(
            s,
            "\t{}\t{}\t0\t{}\t{}\t{}\t{}\t1\t{}\t{};",
            bus.id,
            mw(g.p_nominal),
            mw(g.q_max),
            mw(g.q_min),
            bus.v_setpoint,
            base,
            mw(g.p_max),
            mw(g.p_min)
        );
    }
    let _ = writeln!(s, "];");
    let _ = writeln!(s, "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\tangmin\tangmax");
    let _ = writeln!(s, "mpc.branch = [");
    for br in &case.branches {
        let rate = if br.s_max.is_finite() { mw(br.s_max) } else { 0.0 };
        let _ = writeln!(
            s,
            "\t{}\t{}\t{}\t{}\t{}\t{rate}\t{rate}\t{rate}\t{}\t0\t1\t-360\t360;",
            case.buses[br.from_bus].id,
            case.buses[br.to_bus].id,
            br.r,
            br.x,
            br.b_charging,
            br.tap_ratio
        );
    }
    let _ = writeln!(s, "];");
    let _ = writeln!(s, "mpc.gencost = [");
    for g in &case.generators {
        let _ = writeln!(
            s,
            "\t2\t0\t0\t3\t{}\t{}\t{};",
            invert_exact(g.cost.c2, g.cost.c2 / (base * base), |y| y * base * base),
            invert_exact(g.cost.c1, g.cost.c1 / base, |y| y * base),
            g.cost.c0
        );
    }
    let _ = writeln!(s, "];");
    s
}

// ---------------------------------------------------------------------------
// Network matrices

/// Complex bus admittance matrix (dense, n×n).
pub fn build_ybus(case: &GridCase) -> Mat<Complex64> {
    let n = case.n_buses();
    let mut y = Mat::<Complex64>::zeros(n, n);
    for br in &case.branches {
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let half = Complex64::new(0.0, br.b_charging / 2.0);
        let t = br.tap_ratio;
        let (f, k) = (br.from_bus, br.to_bus);
        y[(f, f)] += (ys + half) / (t * t);
        y[(k, k)] += ys + half;
        y[(f, k)] -= ys / t;
        y[(k, f)] -= ys / t;
    }
    for (i, b) in case.buses.iter().enumerate() {
        y[(i, i)] += Complex64::new(b.g_shunt, b.b_shunt);
    }
    y
}

/// Lossless DC network model.
#[derive(Debug, Clone)]
pub struct DcMatrices {
    /// Full nodal susceptance matrix (n×n).
    pub b_bus: Mat<f64>,
    /// Maps bus angles to branch flows (branches × buses).
    pub flow_map: Mat<f64>,
    pub slack: usize,
    /// Bus indices of the reduced system (all but the slack), in order.
    pub reduced_buses: Vec<usize>,
    reduced: Cholesky,
}

impl DcMatrices {
    /// Reduced `B` with the slack row and column removed.
    pub fn reduced_matrix(&self) -> Mat<f64> {
        let r = &self.reduced_buses;
        Mat::from_fn(r.len(), r.len(), |i, j| self.b_bus[(r[i], r[j])])
    }

    /// Angles (slack at 0) for a vector of net injections.
    pub fn angles(&self, p_injection: &[f64]) -> Vec<f64> {
        let rhs: Vec<f64> = self.reduced_buses.iter().map(|&i| p_injection[i]).collect();
        let sol = self.reduced.solve_vec(&rhs);
        let mut theta = vec![0.0; self.b_bus.nrows()];
        for (k, &i) in self.reduced_buses.iter().enumerate() {
            theta[i] = sol[k];
        }
        theta
    }
}

/// DC susceptance (series `1/(x·tap)` per branch) and angle-to-flow map.
pub fn build_dc_matrices(case: &GridCase) -> Result<DcMatrices> {
    let n = case.n_buses();
    let nbr = case.branches.len();
    let mut b_bus = Mat::<f64>::zeros(n, n);
    let mut flow_map = Mat::<f64>::zeros(nbr, n);
    for (k, br) in case.branches.iter().enumerate() {
        let b = 1.0 / (br.x * br.tap_ratio);
        let (f, t) = (br.from_bus, br.to_bus);
        b_bus[(f, f)] += b;
        b_bus[(t, t)] += b;
        b_bus[(f, t)] -= b;
        b_bus[(t, f)] -= b;
        flow_map[(k, f)] = b;
        flow_map[(k, t)] = -b;
    }
    let slack = case.slack_bus();
    let reduced_buses: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let reduced_mat = Mat::from_fn(reduced_buses.len(), reduced_buses.len(), |i, j| {
        b_bus[(reduced_buses[i], reduced_buses[j])]
    });
    let reduced = Cholesky::new(reduced_mat.as_ref()).ok_or_else(|| {
        Error::Connectivity("reduced susceptance matrix is singular (islanded grid)".into())
    })?;
    Ok(DcMatrices {
        b_bus,
        flow_map,
        slack,
        reduced_buses,
        reduced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;

    pub(crate) fn two_bus(r: f64, x: f64) -> String {
        format!(
            "mpc.baseMVA = 100;\n\
             mpc.bus = [\n\
             1 3 0 0 0 0 1 1 0 100 1 1.1 0.9;\n\
             2 1 0 0 0 0 1 1 0 100 1 1.1 0.9;\n];\n\
             mpc.gen = [\n1 0 0 100 -100 1 100 1 200 0;\n];\n\
             mpc.branch = [\n1 2 {r} {x} 0 100 100 100 0 0 1 -360 360;\n];\n\
             mpc.gencost = [\n2 0 0 3 0.01 1 0;\n];\n"
        )
    }

    #[test]
    fn bundled_cases_have_expected_sizes() {
        let c9 = parse_case(cases::CASE9).unwrap();
        assert_eq!((c9.buses.len(), c9.generators.len(), c9.branches.len()), (9, 3, 9));
        let c39 = parse_case(cases::CASE39).unwrap();
        assert_eq!((c39.buses.len(), c39.generators.len(), c39.branches.len()), (39, 10, 46));
        assert_eq!(c39.buses[c39.slack_bus()].id, 31);
    }

    #[test]
    fn per_unit_conversion() {
        let c9 = parse_case(cases::CASE9).unwrap();
        let b5 = &c9.buses[c9.bus_index(5).unwrap()];
        assert!((b5.p_load - 0.9).abs() < 1e-15);
        assert!((b5.q_load - 0.3).abs() < 1e-15);
        let g1 = &c9.generators[0];
        assert!(g1.is_slack);
        assert!((g1.p_max - 2.5).abs() < 1e-15);
        // 0.11 $/MW² h on a 100 MVA base.
        assert!((g1.cost.c2 - 1100.0).abs() < 1e-9);
        assert!((g1.cost.c1 - 500.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_two_slack_buses() {
        let text = cases::CASE9.replacen("\t2\t2\t0", "\t2\t3\t0", 1);
        let err = parse_case(&text).unwrap_err();
        assert!(matches!(err, Error::MultipleSlack(_)), "{err}");
        assert!(err.to_string().contains("multiple slack buses"));
    }

    #[test]
    fn rejects_missing_slack_dangling_and_zero_x() {
        let no_slack = two_bus(0.0, 0.1).replace("1 3 0 0", "1 2 0 0");
        assert!(matches!(parse_case(&no_slack), Err(Error::MissingSlack)));
        let dangling = two_bus(0.0, 0.1).replace("1 2 0 0.1", "1 7 0 0.1");
        assert!(matches!(parse_case(&dangling), Err(Error::DanglingBus { bus: 7, .. })));
        let zero_x = two_bus(0.0, 0.0);
        assert!(matches!(parse_case(&zero_x), Err(Error::ZeroReactance(1))));
    }

    #[test]
    fn syntax_errors_report_position() {
        let bad = "mpc.baseMVA = 100;\nmpc.bus = [\n1 3 0 0 0 0 1 1 0 100 1 1.1 0.9;\n2 1 0 x;\n];\n";
        match parse_case(bad) {
            Err(Error::Syntax { line, column, .. }) => assert_eq!((line, column), (4, 7)),
            other => panic!("expected syntax error, got {other:?}"),
        }
        let ragged = "mpc.baseMVA = 100;\nmpc.bus = [\n1 3 0;\n2 1;\n];\n";
        match parse_case(ragged) {
            Err(Error::Syntax { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn ybus_two_bus_lossless() {
        let case = parse_case(&two_bus(0.0, 0.1)).unwrap();
        let y = build_ybus(&case);
        let expect = [[-10.0, 10.0], [10.0, -10.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!(y[(i, j)].re.abs() < 1e-12);
                assert!((y[(i, j)].im - expect[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ybus_without_branches_is_shunts() {
        let mut case = parse_case(&two_bus(0.0, 0.1)).unwrap();
        case.branches.clear();
        case.buses[1].b_shunt = 0.25;
        let y = build_ybus(&case);
        assert_eq!(y[(0, 0)], Complex64::new(0.0, 0.0));
        assert_eq!(y[(1, 1)], Complex64::new(0.0, 0.25));
        assert_eq!(y[(0, 1)], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn ybus_row_sums_equal_bus_shunts_without_charging() {
        let mut case = parse_case(cases::CASE9).unwrap();
        for br in &mut case.branches {
            br.b_charging = 0.0;
        }
        case.buses[4].g_shunt = 0.01;
        case.buses[4].b_shunt = 0.2;
        let y = build_ybus(&case);
        for i in 0..case.n_buses() {
            let mut sum = Complex64::new(0.0, 0.0);
            for j in 0..case.n_buses() {
                sum += y[(i, j)];
            }
            let shunt = Complex64::new(case.buses[i].g_shunt, case.buses[i].b_shunt);
            assert!((sum - shunt).norm() < 1e-12, "bus {i}: {sum}");
        }
    }

    #[test]
    fn ybus_symmetric_with_unit_taps() {
        for text in [cases::CASE9, cases::CASE39] {
            let mut case = parse_case(text).unwrap();
            for br in &mut case.branches {
                br.tap_ratio = 1.0;
            }
            let y = build_ybus(&case);
            let n = case.n_buses();
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let row: f64 = (0..n).map(|j| (y[(i, j)] - y[(j, i)]).norm()).sum();
                worst = worst.max(row);
            }
            assert!(worst < 1e-12);
        }
    }

    #[test]
    fn dc_reduced_matrices() {
        let case = parse_case(&two_bus(0.0, 0.1)).unwrap();
        let dc = build_dc_matrices(&case).unwrap();
        let b = dc.reduced_matrix();
        assert_eq!((b.nrows(), b.ncols()), (1, 1));
        assert!((b[(0, 0)] - 10.0).abs() < 1e-12);

        let tri = "mpc.baseMVA = 100;\nmpc.bus = [\n\
                   1 3 0 0 0 0 1 1 0 100 1 1.1 0.9;\n2 1 0 0 0 0 1 1 0 100 1 1.1 0.9;\n\
                   3 1 0 0 0 0 1 1 0 100 1 1.1 0.9;\n];\n\
                   mpc.gen = [\n1 0 0 100 -100 1 100 1 200 0;\n];\n\
                   mpc.branch = [\n1 2 0 0.1 0 0 0 0 0 0 1;\n2 3 0 0.1 0 0 0 0 0 0 1;\n1 3 0 0.1 0 0 0 0 0 0 1;\n];\n\
                   mpc.gencost = [\n2 0 0 3 0 1 0;\n];\n";
        let case = parse_case(tri).unwrap();
        let b = build_dc_matrices(&case).unwrap().reduced_matrix();
        let expect = [[20.0, -10.0], [-10.0, 20.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((b[(i, j)] - expect[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn islanded_case_is_rejected() {
        let text = "mpc.baseMVA = 100;\nmpc.bus = [\n\
                    1 3 0 0 0 0 1 1 0 100 1 1.1 0.9;\n2 1 0 0 0 0 1 1 0 100 1 1.1 0.9;\n\
                    3 1 0 0 0 0 1 1 0 100 1 1.1 0.9;\n4 1 0 0 0 0 1 1 0 100 1 1.1 0.9;\n];\n\
                    mpc.gen = [\n1 0 0 100 -100 1 100 1 200 0;\n];\n\
                    mpc.branch = [\n1 2 0 0.1 0 0 0 0 0 0 1;\n3 4 0 0.1 0 0 0 0 0 0 1;\n];\n\
                    mpc.gencost = [\n2 0 0 3 0 1 0;\n];\n";
        assert!(matches!(parse_case(text), Err(Error::Connectivity(_))));
        // Bypass the parser check: the DC assembly must also refuse.
        let mut case = parse_case(&two_bus(0.0, 0.1)).unwrap();
        case.buses.push(case.buses[1].clone());
        case.buses[2].id = 3;
        assert!(matches!(build_dc_matrices(&case), Err(Error::Connectivity(_))));
    }

    #[test]
    fn reduced_dc_matrix_is_positive_definite() {
        for text in [cases::CASE9, cases::CASE39] {
            let case = parse_case(text).unwrap();
            let dc = build_dc_matrices(&case).unwrap();
            assert!(Cholesky::new(dc.reduced_matrix().as_ref()).is_some());
        }
    }
}
