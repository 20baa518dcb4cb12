use proptest::prelude::*;
use sicql::lang::*;

pub const EHR_QUERY: &str = include_str!("fixtures/ehr.sicql");

#[test]
fn ehr_parses_with_desugared_conjunctions() {
    let plan = parse_query(EHR_QUERY).unwrap();
    let lines = format_logical(&plan);
    assert_eq!(lines.lines().count(), 15);
    assert_eq!(plan.table(), Some("ehr_table"));

    let ids: Vec<&str> = plan.constraints().map(|c| c.id.as_str()).collect();
    assert_eq!(
        ids,
        [
            "c1",
            "phys_exam.type",
            "lab_res.type",
            "med_hist.type",
            "med_hist_sum.type",
            "c2",
            "c3",
            "c4",
            "c5",
            "c6",
            "c7"
        ]
    );
    let c6 = plan.constraint("c6").unwrap();
    assert_eq!(c6.retry, Some(1));
    assert_eq!(c6.on_fail, Some(FailureMode::Continue));
    match &c6.class {
        ConstraintClass::Exclude(Matcher::Prompt(p)) => assert_eq!(p.raw_text, "test results"),
        other => panic!("{other:?}"),
    }
    let c7 = plan.constraint("c7").unwrap();
    assert_eq!(c7.target, Target::Operator("sepsis_filter".into()));
    assert_eq!(c7.class, ConstraintClass::Sound);

    match &plan.constraint("c5").unwrap().class {
        ConstraintClass::Domain {
            spec: DomainSpec::MaxLength { limit },
            ..
        } => assert_eq!(*limit, 1000),
        other => panic!("{other:?}"),
    }
    let p = plan.stages[6].prompt().unwrap();
    assert_eq!(p.raw_text, "extract the patient's medical history from the {ehr}");
}

#[test]
fn set_prompt_placeholders() {
    let plan = parse_query("FROM t |> SET dob = p'canonicalize {dob} into YYYY-MM-DD'").unwrap();
    match &plan.stages[1].kind {
        StageKind::Set {
            attr,
            value: Operand::Prompt(p),
        } => {
            assert_eq!(attr, "dob");
            assert_eq!(p.placeholders, ["dob"]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn bare_attribute_assert_reports_position() {
    let err = parse_query("FROM t |> ASSERT x").unwrap_err();
    assert_eq!((err.line, err.column), (1, 19));
    assert!(err.message.contains("after `x`"), "{}", err.message);
}

#[test]
fn errors() {
    let cases = [
        (
            "FROM t |> AGGREGATE p'{a}' AS s |> ASSERT zz > 1",
            "unknown attribute `zz`",
        ),
        (
            "FROM t |> WHERE a > 1 AS f |> WHERE b > 1 AS f",
            "duplicate alias `f`",
        ),
        (
            "FROM t |> EXTEND p'{a}' AS y |> ASSERT y GROUNDED RETRY -1",
            "non-negative",
        ),
        ("FROM t |> ASSERT a SOUND", "SOUND requires an operator alias"),
        ("FROM t |> WHERE p'{a}' AS f |> ASSERT f GROUNDED", "names an operator"),
        ("FROM t |> ASSERT a GROUNDED", "not generated by a semantic operator"),
        (
            "FROM t |> ASSERT REGEXP_CONTAINS(a, r'(')",
            "invalid regex",
        ),
        ("FROM t |> ASSERT 1 < 2", "at least one attribute"),
        ("FROM t |> EXTEND a + 1 AS a", "already exists"),
        ("FROM t |> EXTEND p'{}' AS y", "empty placeholder"),
        ("FROM t |> EXTEND p'abc AS y", "unterminated"),
        ("FROM t |> WHERE a || 'x'", "boolean"),
        ("FROM t |> SELECT a", "expected SET"),
    ];
    for (src, needle) in cases {
        let err = match parse_query(src) {
            Err(e) => e,
            Ok(p) => panic!("{src} parsed: {p:?}"),
        };
        assert!(
            err.message.contains(needle),
            "{src}: `{}` lacks `{needle}`",
            err.message
        );
        assert!(err.line >= 1 && err.column >= 1);
    }
}

#[test]
fn catalog_types_are_checked() {
    let mut cat = Catalog::new();
    cat.insert(
        "t".into(),
        Schema::new(vec![
            Column {
                name: "n".into(),
                ty: Some(DataType::Int),
            },
            Column {
                name: "s".into(),
                ty: Some(DataType::String),
            },
        ]),
    );
    assert!(parse_query_with_catalog("FROM t |> WHERE n > 3", &cat).is_ok());
    let err = parse_query_with_catalog("FROM t |> WHERE s + 1 > 3", &cat).unwrap_err();
    assert!(err.message.contains("numeric"), "{}", err.message);
    let err = parse_query_with_catalog("FROM u", &cat).unwrap_err();
    assert!(err.message.contains("unknown table"));
    let err = parse_query_with_catalog("FROM t |> WHERE zz > 3", &cat).unwrap_err();
    assert!(err.message.contains("unknown attribute"));
    let err = parse_query_with_catalog("FROM t |> SET q = 1", &cat).unwrap_err();
    assert!(err.message.contains("unknown attribute `q`"));
}

#[test]
fn implicit_type_domains_attach_to_their_stage() {
    let plan = parse_query(
        "FROM t |> EXTEND p'{a}' AS x INT |> EXTEND a + 1 AS y INT \
         |> AGGREGATE p'{x}' AS s GROUP BY a",
    )
    .unwrap();
    assert_eq!(plan.stages[1].implicit.len(), 1);
    assert_eq!(plan.stages[1].implicit[0].id, "x.type");
    assert!(plan.stages[2].implicit.is_empty());
    assert!(plan.stages[3].implicit.is_empty());
    let names: Vec<&str> = plan.stages[3].schema.names().collect();
    assert_eq!(names, ["a", "s"]);
}

#[test]
fn assertions_target_latest_written_attribute() {
    let plan =
        parse_query("FROM t |> EXTEND a * 2 AS b |> EXTEND b + 1 AS c |> ASSERT a < c AND b > a")
            .unwrap();
    assert_eq!(plan.constraint("c1").unwrap().target.name(), "c");
    assert_eq!(plan.constraint("c2").unwrap().target.name(), "b");
}

#[test]
fn domain_shapes_are_recognized() {
    let plan = parse_query(
        "FROM t |> ASSERT x IN ('a', 'b') AND y BETWEEN 1 AND 5 AND LENGTH(z) <= 9 \
         AND REGEXP_CONTAINS(w, r'^\\d+$') AND x = 'a'",
    )
    .unwrap();
    let specs: Vec<_> = plan
        .constraints()
        .map(|c| match &c.class {
            ConstraintClass::Domain { spec, .. } => Some(spec.clone()),
            _ => None,
        })
        .collect();
    assert_eq!(
        specs,
        vec![
            Some(DomainSpec::ValueSet {
                values: vec!["a".into(), "b".into()]
            }),
            Some(DomainSpec::Range { lo: 1.0, hi: 5.0 }),
            Some(DomainSpec::MaxLength { limit: 10 }),
            Some(DomainSpec::Regex {
                pattern: "^\\d+$".into()
            }),
            None,
        ]
    );
}

#[test]
fn scan_only_formats_as_single_line() {
    let plan = parse_query("FROM t").unwrap();
    assert_eq!(format_logical(&plan), "FROM t  -- Scan(t)\n");
}

#[test]
fn ehr_round_trips_through_formatter() {
    let plan = parse_query(EHR_QUERY).unwrap();
    let again = parse_query(&format_logical(&plan)).unwrap();
    assert_eq!(plan, again);
}

#[test]
fn standalone_constraints() {
    let cs = parse_constraints("ASSERT note EXCLUDES ('ssn', 'mrn') AND f SOUND", &["f"]).unwrap();
    assert_eq!(cs.len(), 2);
    assert_eq!(cs[1].target, Target::Operator("f".into()));
    assert!(parse_constraints::<&str>("ASSERT f SOUND", &[]).is_err());
    assert!(parse_constraints::<&str>("ASSERT a > 1 |> ASSERT b", &[]).is_err());
}

// Generated corpus: well-formed queries over source columns a, b, c, d.
// Only prompts touch d, so its type never conflicts with arithmetic.

fn ident() -> impl Strategy<Value = &'static str> {
    prop_oneof![Just("a"), Just("b"), Just("c")]
}

fn scalar() -> impl Strategy<Value = String> {
    let leaf = prop_oneof![
        ident().prop_map(str::to_string),
        (-50i64..50).prop_map(|i| i.to_string()),
        (0u32..1000).prop_map(|i| format!("{}.5", i)),
    ];
    leaf.prop_recursive(3, 12, 2, |inner| {
        prop_oneof![
            (inner.clone(), prop_oneof![Just("+"), Just("-"), Just("*"), Just("/")], inner.clone())
                .prop_map(|(l, op, r)| format!("{l} {op} {r}")),
            inner.clone().prop_map(|e| format!("({e})")),
            inner.clone().prop_map(|e| format!("-({e})")),
            ident().prop_map(|a| format!("LENGTH({a})")),
            inner.prop_map(|e| format!("({e})::FLOAT")),
        ]
    })
}

fn predicate() -> impl Strategy<Value = String> {
    let cmp = (
        (ident(), scalar()).prop_map(|(a, s)| format!("{a} - {s}")),
        prop_oneof![Just("<"), Just("<="), Just("="), Just("<>"), Just(">"), Just(">=")],
        scalar(),
    )
        .prop_map(|(l, op, r)| format!("{l} {op} {r}"));
    let atom = prop_oneof![
        cmp,
        ident().prop_map(|a| format!("{a} IS NOT NULL")),
        (ident(), 0i64..5, 5i64..9).prop_map(|(a, l, h)| format!("{a} BETWEEN {l} AND {h}")),
        ident().prop_map(|a| format!("{a} NOT IN ('x', 'it''s')")),
        ident().prop_map(|a| format!("REGEXP_CONTAINS({a}, r'^[a-z]+\\d?$')")),
    ];
    atom.prop_recursive(2, 8, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(l, r)| format!("({l} AND {r})")),
            (inner.clone(), inner.clone()).prop_map(|(l, r)| format!("{l} OR {r}")),
            inner.prop_map(|e| format!("NOT ({e})")),
        ]
    })
}

#[derive(Debug, Clone)]
enum Step {
    Extend(bool),
    Where(bool),
    Set,
    Assert(u8, String),
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        any::<bool>().prop_map(Step::Extend),
        any::<bool>().prop_map(Step::Where),
        Just(Step::Set),
        (0u8..6, predicate()).prop_map(|(k, p)| Step::Assert(k, p)),
    ]
}

fn query() -> impl Strategy<Value = String> {
    (prop::collection::vec(step(), 0..10), predicate(), any::<bool>()).prop_map(
        |(steps, pred, agg)| {
            let mut q = String::from("FROM t -- generated\n");
            let mut generated: Vec<String> = Vec::new();
            let mut aliases: Vec<String> = Vec::new();
            for (i, s) in steps.into_iter().enumerate() {
                let line = match s {
                    Step::Extend(prompt) => {
                        let out = format!("g{i}");
                        let line = if prompt {
                            format!("EXTEND EXTRACTIVE p'pull {{a}} from {{b}} ''q''' AS {out} STRING")
                        } else {
                            format!("EXTEND a + {i} AS n{i}")
                        };
                        if prompt {
                            generated.push(out);
                        }
                        line
                    }
                    Step::Where(prompt) => {
                        let alias = format!("f{i}");
                        aliases.push(alias.clone());
                        if prompt {
                            format!("WHERE p'is {{c}} ok?' AS {alias}")
                        } else {
                            format!("WHERE ({pred}) AS {alias}")
                        }
                    }
                    Step::Set => "SET d = p'fix {d}'".to_string(),
                    Step::Assert(kind, p) => match (kind, generated.last(), aliases.last()) {
                        (1, Some(g), _) => format!("ASSERT {g} GROUNDED RETRY 2"),
                        (2, Some(g), _) => {
                            format!("ASSERT {g} EXCLUDES ('ssn', 'dob') AND {g} INCLUDES r'\\w+' IGNORE ON FAIL")
                        }
                        (3, _, Some(f)) => format!("ASSERT {f} SOUND ABORT ON FAIL"),
                        (4, Some(g), _) => format!("ASSERT {g} RELEVANT AND {p}"),
                        _ => format!("ASSERT {p} RETRY {kind}"),
                    },
                };
                q.push_str("|> ");
                q.push_str(&line);
                q.push('\n');
            }
            if agg {
                q.push_str("|> AGGREGATE ABSTRACTIVE p'sum {a}' AS s STRING GROUP BY b\n");
                q.push_str("|> ASSERT s GROUNDED AND LENGTH(s) < 100\n");
            }
            q
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn format_then_parse_is_identity(q in query()) {
        let plan = parse_query(&q).map_err(|e| TestCaseError::fail(format!("{e}\n{q}")))?;
        let text = format_logical(&plan);
        let again = parse_query(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        prop_assert_eq!(&plan, &again, "{}", text);
        prop_assert_eq!(format_logical(&again), text);
    }

    #[test]
    fn every_reference_is_in_the_input_schema(q in query()) {
        let plan = parse_query(&q).unwrap();
        for w in plan.stages.windows(2) {
            let input = &w[0].schema;
            for name in w[1].inputs() {
                prop_assert!(input.contains(&name), "{} missing before {:?}", name, w[1].kind);
            }
            if let Some(p) = w[1].prompt() {
                for name in &p.placeholders {
                    prop_assert!(input.contains(name));
                }
            }
        }
    }

    #[test]
    fn conjunction_desugars_to_separate_asserts(
        p1 in predicate(),
        p2 in predicate(),
        retry in 0u32..4,
        mode in prop_oneof![Just("CONTINUE"), Just("IGNORE"), Just("ABORT")],
    ) {
        let joined = parse_query(&format!(
            "FROM t |> ASSERT {p1} AND {p2} RETRY {retry} {mode} ON FAIL"
        )).unwrap();
        let split = parse_query(&format!(
            "FROM t |> ASSERT {p1} RETRY {retry} {mode} ON FAIL |> ASSERT {p2} RETRY {retry} {mode} ON FAIL"
        )).unwrap();
        prop_assert_eq!(joined, split);
    }

    #[test]
    fn expression_printing_reparses(p in predicate()) {
        let plan = parse_query(&format!("FROM t |> WHERE {p}")).unwrap();
        let StageKind::Where { predicate: Operand::Expr(e), .. } = &plan.stages[1].kind else {
            unreachable!()
        };
        let printed = expr_sql(e);
        let again = parse_query(&format!("FROM t |> WHERE {printed}")).unwrap();
        prop_assert_eq!(&plan.stages[1].kind, &again.stages[1].kind);
    }
}
