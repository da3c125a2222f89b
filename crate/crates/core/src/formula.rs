//! Model-formula parsing.
//!
//! The grammar is a small `lmer`-style subset plus the `mp(random, fixed)`
//! multiplicative term:
//!
//! ```text
//! formula := ident "~" term ("+" term)*
//! term    := "1"
//!          | ident                                  fixed factor
//!          | "(" "1" "|" ident (":" ident)? ")"     random intercept / interaction
//!          | "mp" "(" ident "," ident ")"           multiplicative term
//! ```
//!
//! Whitespace is insignificant. The intercept `1` is implied when omitted;
//! an explicit `0` (no intercept) is rejected because the cell-means
//! parameterization assumes a grand mean exists.

use std::fmt;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::num::Scalar;

/// Parsed and validated model structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub response: String,
    /// Categorical fixed factors in the mean structure.
    pub fixed_factors: Vec<String>,
    /// Grouping factors with a random intercept, `(1|g)`.
    pub random_intercepts: Vec<String>,
    /// Random interaction terms, `(1|g:h)`.
    pub random_interactions: Vec<(String, String)>,
    /// The one optional multiplicative term `mp(random, fixed)`.
    pub mult_term: Option<(String, String)>,
    pub has_intercept: bool,
}

impl ModelSpec {
    /// Canonical textual form; parsing it again returns an equal spec.
    pub fn pretty(&self) -> String {
        let mut terms: Vec<String> = vec!["1".to_string()];
        terms.extend(self.fixed_factors.iter().cloned());
        terms.extend(self.random_intercepts.iter().map(|g| format!("(1|{g})")));
        terms.extend(
            self.random_interactions
                .iter()
                .map(|(g, h)| format!("(1|{g}:{h})")),
        );
        if let Some((r, f)) = &self.mult_term {
            terms.push(format!("mp({r},{f})"));
        }
        format!("{} ~ {}", self.response, terms.join(" + "))
    }

    /// All factor names the model references, deduplicated in order.
    pub fn referenced_factors(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut push = |name: &str| {
            if !out.iter().any(|n| n == name) {
                out.push(name.to_string());
            }
        };
        for f in &self.fixed_factors {
            push(f);
        }
        for g in &self.random_intercepts {
            push(g);
        }
        for (g, h) in &self.random_interactions {
            push(g);
            push(h);
        }
        if let Some((r, f)) = &self.mult_term {
            push(r);
            push(f);
        }
        out
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.pretty())
    }
}

// ---- lexer ----

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    One,
    Zero,
    Tilde,
    Plus,
    LParen,
    RParen,
    Bar,
    Colon,
    Comma,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src: src.as_bytes(), pos: 0 }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    /// Next token plus its start offset; None at end of input.
    fn next(&mut self) -> Result<Option<(Tok, usize)>> {
        self.skip_ws();
        if self.pos >= self.src.len() {
            return Ok(None);
        }
        let start = self.pos;
        let c = self.src[self.pos];
        let tok = match c {
            b'~' => Tok::Tilde,
            b'+' => Tok::Plus,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b'|' => Tok::Bar,
            b':' => Tok::Colon,
            b',' => Tok::Comma,
            b'1' if !self.ident_continues(self.pos + 1) => Tok::One,
            b'0' if !self.ident_continues(self.pos + 1) => Tok::Zero,
            _ if c.is_ascii_alphabetic() || c == b'_' || c == b'.' => {
                let mut end = self.pos;
                while self.ident_continues(end) {
                    end += 1;
                }
                let ident = std::str::from_utf8(&self.src[self.pos..end])
                    .expect("ascii ident")
                    .to_string();
                self.pos = end;
                return Ok(Some((Tok::Ident(ident), start)));
            }
            _ => {
                return Err(Error::Syntax {
                    offset: start,
                    msg: format!("unexpected character `{}`", c as char),
                })
            }
        };
        self.pos += 1;
        Ok(Some((tok, start)))
    }

    fn ident_continues(&self, at: usize) -> bool {
        at < self.src.len()
            && (self.src[at].is_ascii_alphanumeric() || self.src[at] == b'_' || self.src[at] == b'.')
    }
}

// ---- parser ----

struct Parser {
    toks: Vec<(Tok, usize)>,
    at: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&(Tok, usize)> {
        self.toks.get(self.at)
    }

    fn next(&mut self) -> Option<(Tok, usize)> {
        let t = self.toks.get(self.at).cloned();
        self.at += 1;
        t
    }

    fn here(&self) -> usize {
        self.peek().map(|(_, o)| *o).unwrap_or(self.end)
    }

    fn expect(&mut self, want: &Tok, what: &str) -> Result<usize> {
        match self.next() {
            Some((t, off)) if &t == want => Ok(off),
            Some((_, off)) => Err(Error::Syntax { offset: off, msg: format!("expected {what}") }),
            None => Err(Error::Syntax { offset: self.end, msg: format!("expected {what}") }),
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<(String, usize)> {
        match self.next() {
            Some((Tok::Ident(s), off)) => Ok((s, off)),
            Some((_, off)) => Err(Error::Syntax { offset: off, msg: format!("expected {what}") }),
            None => Err(Error::Syntax { offset: self.end, msg: format!("expected {what}") }),
        }
    }
}

/// Parse a model formula into a [`ModelSpec`].
pub fn parse_formula(src: &str) -> Result<ModelSpec> {
    if src.trim().is_empty() {
        return Err(Error::Syntax { offset: 0, msg: "empty formula".into() });
    }
    let mut lexer = Lexer::new(src);
    let mut toks = Vec::new();
    while let Some(t) = lexer.next()? {
        toks.push(t);
    }
    let mut p = Parser { toks, at: 0, end: src.len() };

    let (response, _) = p.expect_ident("response name")?;
    p.expect(&Tok::Tilde, "`~`")?;

    let mut spec = ModelSpec {
        response,
        fixed_factors: Vec::new(),
        random_intercepts: Vec::new(),
        random_interactions: Vec::new(),
        mult_term: None,
        has_intercept: true,
    };

    loop {
        parse_term(&mut p, &mut spec)?;
        match p.next() {
            None => break,
            Some((Tok::Plus, _)) => continue,
            Some((_, off)) => {
                return Err(Error::Syntax { offset: off, msg: "expected `+` or end of formula".into() })
            }
        }
    }

    // semantic checks
    if let Some((_, f)) = &spec.mult_term {
        if !spec.fixed_factors.contains(f) {
            return Err(Error::MultFixedNotInMean(f.clone()));
        }
    }
    Ok(spec)
}

fn parse_term(p: &mut Parser, spec: &mut ModelSpec) -> Result<()> {
    let off = p.here();
    match p.next() {
        Some((Tok::One, _)) => {
            spec.has_intercept = true;
            Ok(())
        }
        Some((Tok::Zero, off)) => Err(Error::Syntax {
            offset: off,
            msg: "`0` (no intercept) is not supported; the mean structure always includes a grand mean"
                .into(),
        }),
        Some((Tok::Ident(name), off)) => {
            if name == "mp" && matches!(p.peek(), Some((Tok::LParen, _))) {
                p.next(); // consume '('
                let (random, _) = p.expect_ident("random factor name")?;
                p.expect(&Tok::Comma, "`,`")?;
                let (fixed, _) = p.expect_ident("fixed factor name")?;
                p.expect(&Tok::RParen, "`)`")?;
                if spec.mult_term.is_some() {
                    return Err(Error::UnsupportedModel(
                        "more than one mp(...) term; only one multiplicative term is supported"
                            .into(),
                    ));
                }
                spec.mult_term = Some((random, fixed));
                return Ok(());
            }
            if spec.fixed_factors.contains(&name) {
                return Err(Error::Syntax {
                    offset: off,
                    msg: format!("duplicate fixed term `{name}`"),
                });
            }
            spec.fixed_factors.push(name);
            Ok(())
        }
        Some((Tok::LParen, _)) => {
            p.expect(&Tok::One, "`1` (only random intercepts are supported)")?;
            p.expect(&Tok::Bar, "`|`")?;
            let (g, goff) = p.expect_ident("grouping factor name")?;
            match p.next() {
                Some((Tok::RParen, _)) => {
                    if spec.random_intercepts.contains(&g) {
                        return Err(Error::Syntax {
                            offset: goff,
                            msg: format!("duplicate random intercept `(1|{g})`"),
                        });
                    }
                    spec.random_intercepts.push(g);
                    Ok(())
                }
                Some((Tok::Colon, _)) => {
                    let (h, _) = p.expect_ident("second interaction factor")?;
                    p.expect(&Tok::RParen, "`)`")?;
                    let pair = (g, h);
                    if spec.random_interactions.contains(&pair) {
                        return Err(Error::Syntax {
                            offset: goff,
                            msg: format!("duplicate random interaction `(1|{}:{})`", pair.0, pair.1),
                        });
                    }
                    spec.random_interactions.push(pair);
                    Ok(())
                }
                Some((_, off)) => {
                    Err(Error::Syntax { offset: off, msg: "expected `)` or `:`".into() })
                }
                None => Err(Error::Syntax { offset: p.end, msg: "expected `)` or `:`".into() }),
            }
        }
        Some((_, off)) => Err(Error::Syntax { offset: off, msg: "expected a model term".into() }),
        None => Err(Error::Syntax { offset: off, msg: "expected a model term".into() }),
    }
}

/// Name-to-factor binding produced by [`validate_against`].
#[derive(Debug, Clone)]
pub struct Binding {
    /// Index of the single fixed factor, if the mean structure has one.
    pub fixed_factor: Option<usize>,
    /// Index of the grouping factor carrying the random intercept and/or
    /// the multiplicative slope.
    pub group_factor: Option<usize>,
    pub has_a: bool,
    pub has_b: bool,
    /// Factor indices of the random interaction, normalized so that the
    /// grouping factor (when present in the pair) comes first.
    pub d_pair: Option<(usize, usize)>,
    /// Levels of the fixed factor (1 when intercept-only).
    pub n_cells: usize,
    /// Levels of the grouping factor (0 when no grouped random effect).
    pub n_groups: usize,
}

/// Check a parsed model against a dataset and resolve factor names.
///
/// Beyond name resolution this enforces the estimable model class: one
/// categorical fixed factor at most, one random intercept at most, one
/// random interaction at most, and coherent multiplicative-term structure.
pub fn validate_against<F: Scalar>(ms: &ModelSpec, ds: &Dataset<F>) -> Result<Binding> {
    if ds.response_name() != ms.response {
        return Err(Error::ResponseMismatch {
            expected: ms.response.clone(),
            found: ds.response_name().to_string(),
        });
    }

    if ms.fixed_factors.len() > 1 {
        return Err(Error::UnsupportedModel(format!(
            "{} fixed factors; at most one categorical fixed factor is supported (combine \
             crossed factors into one)",
            ms.fixed_factors.len()
        )));
    }
    if ms.random_intercepts.len() > 1 {
        return Err(Error::UnsupportedModel(
            "more than one random intercept grouping".into(),
        ));
    }
    if ms.random_interactions.len() > 1 {
        return Err(Error::UnsupportedModel(
            "more than one random interaction term".into(),
        ));
    }

    // every referenced factor must exist with >= 2 levels
    for name in ms.referenced_factors() {
        let f = ds.factor(&name)?;
        if f.n_levels() < 2 {
            return Err(Error::DegenerateFactor(name));
        }
    }

    let fixed_factor = match ms.fixed_factors.first() {
        Some(name) => Some(ds.factor_index(name)?),
        None => None,
    };
    let a_factor = match ms.random_intercepts.first() {
        Some(name) => Some(ds.factor_index(name)?),
        None => None,
    };
    let b_factor = match &ms.mult_term {
        Some((r, f)) => {
            let fixed_name = ms.fixed_factors.first().expect("checked by parse");
            if f != fixed_name {
                return Err(Error::MultFixedNotInMean(f.clone()));
            }
            if let Some(a) = &ms.random_intercepts.first() {
                if *a != r {
                    return Err(Error::UnsupportedModel(format!(
                        "mp({r},{f}) must share its grouping factor with the random intercept \
                         (1|{a})"
                    )));
                }
            }
            Some(ds.factor_index(r)?)
        }
        None => None,
    };
    let group_factor = a_factor.or(b_factor);

    let d_pair = match ms.random_interactions.first() {
        Some((g, h)) => {
            let gi = ds.factor_index(g)?;
            let hi = ds.factor_index(h)?;
            if gi == hi {
                return Err(Error::UnsupportedModel(format!(
                    "random interaction `(1|{g}:{h})` repeats a factor"
                )));
            }
            // normalize: grouping factor first when it participates
            let pair = match group_factor {
                Some(gf) if hi == gf => (hi, gi),
                _ => (gi, hi),
            };
            if b_factor.is_some() {
                let gf = group_factor.expect("b implies grouping");
                let ff = fixed_factor.expect("mp requires a fixed factor");
                if pair != (gf, ff) {
                    return Err(Error::UnsupportedModel(
                        "with an mp term, the random interaction must pair the mp grouping \
                         factor with the mp fixed factor"
                            .into(),
                    ));
                }
            }
            Some(pair)
        }
        None => None,
    };

    let n_cells = match fixed_factor {
        Some(fi) => ds.factors()[fi].n_levels(),
        None => 1,
    };
    let n_groups = match group_factor {
        Some(gi) => ds.factors()[gi].n_levels(),
        None => 0,
    };

    Ok(Binding {
        fixed_factor,
        group_factor,
        has_a: a_factor.is_some(),
        has_b: b_factor.is_some(),
        d_pair,
        n_cells,
        n_groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Factor;
    use proptest::prelude::*;

    #[test]
    fn parses_full_multiplicative_model() {
        let ms = parse_formula(
            "Cutting ~ 1 + Product + (1|Assessor) + (1|Assessor:Product) + mp(Assessor,Product)",
        )
        .unwrap();
        assert_eq!(ms.response, "Cutting");
        assert_eq!(ms.fixed_factors, vec!["Product"]);
        assert_eq!(ms.random_intercepts, vec!["Assessor"]);
        assert_eq!(
            ms.random_interactions,
            vec![("Assessor".to_string(), "Product".to_string())]
        );
        assert_eq!(
            ms.mult_term,
            Some(("Assessor".to_string(), "Product".to_string()))
        );
    }

    #[test]
    fn parses_plain_mixed_model() {
        let ms = parse_formula("y ~ 1 + F + (1|G)").unwrap();
        assert!(ms.mult_term.is_none());
        assert_eq!(ms.fixed_factors, vec!["F"]);
        assert_eq!(ms.random_intercepts, vec!["G"]);
    }

    #[test]
    fn mp_without_fixed_in_mean_is_semantic_error() {
        let err = parse_formula("y ~ 1 + mp(G,F)").unwrap_err();
        assert!(matches!(err, Error::MultFixedNotInMean(f) if f == "F"));
    }

    #[test]
    fn double_mp_is_unsupported() {
        let err = parse_formula("y ~ 1 + F + mp(G,F) + mp(H,F)").unwrap_err();
        assert!(matches!(err, Error::UnsupportedModel(_)));
    }

    #[test]
    fn syntax_error_reports_byte_offset() {
        let src = "y ~ 1 + @";
        let err = parse_formula(src).unwrap_err();
        match err {
            Error::Syntax { offset, .. } => assert_eq!(offset, 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn explicit_zero_intercept_is_rejected() {
        assert!(matches!(
            parse_formula("y ~ 0 + F + (1|G)"),
            Err(Error::Syntax { .. })
        ));
    }

    #[test]
    fn intercept_implied_when_omitted() {
        let ms = parse_formula("y ~ F + (1|G)").unwrap();
        assert!(ms.has_intercept);
    }

    #[test]
    fn whitespace_is_insignificant() {
        let a = parse_formula("y~1+F+(1|G)+mp(G,F)").unwrap();
        let b = parse_formula("  y ~ 1 + F + ( 1 | G ) + mp( G , F )  ").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_slope_syntax_is_rejected() {
        assert!(matches!(
            parse_formula("y ~ 1 + F + (x|G)"),
            Err(Error::Syntax { .. })
        ));
    }

    #[test]
    fn pretty_parse_is_fixed_point() {
        let src = "y~F+(1|G)+(1|G:F)+mp(G,F)";
        let ms = parse_formula(src).unwrap();
        let printed = ms.pretty();
        let reparsed = parse_formula(&printed).unwrap();
        assert_eq!(ms, reparsed);
        assert_eq!(printed, reparsed.pretty());
    }

    fn toy_dataset(levels_g: usize, levels_f: usize) -> Dataset<f64> {
        let n = levels_g * levels_f;
        let mut gcodes = Vec::new();
        let mut fcodes = Vec::new();
        for i in 0..levels_g {
            for j in 0..levels_f {
                gcodes.push(i as u32);
                fcodes.push(j as u32);
            }
        }
        Dataset::from_parts(
            "y",
            (0..n).map(|i| i as f64).collect(),
            vec![
                Factor {
                    name: "G".into(),
                    levels: (0..levels_g).map(|i| format!("g{i}")).collect(),
                    codes: gcodes,
                },
                Factor {
                    name: "F".into(),
                    levels: (0..levels_f).map(|j| format!("f{j}")).collect(),
                    codes: fcodes,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn binding_resolves_dimensions() {
        let ds = toy_dataset(8, 12);
        let ms = parse_formula("y ~ 1 + F + (1|G) + (1|G:F) + mp(G,F)").unwrap();
        let b = validate_against(&ms, &ds).unwrap();
        assert_eq!(b.n_groups, 8);
        assert_eq!(b.n_cells, 12);
        assert!(b.has_a && b.has_b);
        assert_eq!(b.d_pair, Some((0, 1)));
    }

    #[test]
    fn unknown_column_is_reported() {
        let ds = toy_dataset(3, 2);
        let ms = parse_formula("y ~ 1 + F + (1|Judge)").unwrap();
        let err = validate_against(&ms, &ds).unwrap_err();
        assert!(matches!(err, Error::UnknownFactor(name) if name == "Judge"));
    }

    #[test]
    fn single_level_grouping_is_degenerate() {
        let ds = toy_dataset(1, 4);
        let ms = parse_formula("y ~ 1 + F + (1|G)").unwrap();
        let err = validate_against(&ms, &ds).unwrap_err();
        assert!(matches!(err, Error::DegenerateFactor(name) if name == "G"));
    }

    #[test]
    fn interaction_pair_is_normalized_group_first() {
        let ds = toy_dataset(4, 3);
        let ms = parse_formula("y ~ 1 + F + (1|G) + (1|F:G) + mp(G,F)").unwrap();
        let b = validate_against(&ms, &ds).unwrap();
        assert_eq!(b.d_pair, Some((0, 1))); // G first even though written F:G
    }

    #[test]
    fn two_fixed_factors_are_unsupported() {
        let ds = toy_dataset(4, 3);
        let mut ms = parse_formula("y ~ 1 + F + (1|G)").unwrap();
        ms.fixed_factors.push("G".into());
        assert!(matches!(
            validate_against(&ms, &ds),
            Err(Error::UnsupportedModel(_))
        ));
    }

    prop_compose! {
        fn arb_ident()(s in "[A-Za-z][A-Za-z0-9_]{0,8}") -> String {
            if s == "mp" { "mpx".to_string() } else { s }
        }
    }

    proptest! {
        // parse -> pretty -> parse is the identity on the canonical form
        #[test]
        fn prop_roundtrip(
            resp in arb_ident(),
            fixed in arb_ident(),
            group in arb_ident(),
            with_ri in any::<bool>(),
            with_int in any::<bool>(),
            with_mp in any::<bool>(),
        ) {
            prop_assume!(resp != fixed && resp != group && fixed != group);
            let mut src = format!("{resp} ~ 1 + {fixed}");
            if with_ri {
                src.push_str(&format!(" + (1|{group})"));
            }
            if with_int {
                src.push_str(&format!(" + (1|{group}:{fixed})"));
            }
            if with_mp {
                src.push_str(&format!(" + mp({group},{fixed})"));
            }
            let ms = parse_formula(&src).unwrap();
            let reparsed = parse_formula(&ms.pretty()).unwrap();
            prop_assert_eq!(ms, reparsed);
        }
    }
}
