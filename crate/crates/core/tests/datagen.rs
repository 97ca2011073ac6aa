use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use todi::datagen::*;
use todi::eval::{functional_group_match, functional_groups, groups_in_text, is_valid, FunctionalGroup};
use todi::selfies::{selfies_to_graph, smiles_to_graph};

fn corpus() -> &'static Vec<TextOmicsRecord> {
    static C: OnceLock<Vec<TextOmicsRecord>> = OnceLock::new();
    C.get_or_init(|| generate_records(&DatagenConfig::default()).unwrap())
}

#[test]
fn single_atom_walk() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let g = random_molecule(&mut rng, 1);
        assert_eq!(g.atom_count(), 1);
    }
}

#[test]
fn seeded_walk_reproducible() {
    let a = random_molecule(&mut ChaCha8Rng::seed_from_u64(5), 20);
    let b = random_molecule(&mut ChaCha8Rng::seed_from_u64(5), 20);
    assert_eq!(a, b);
}

#[test]
fn random_walks_are_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let g = random_molecule(&mut rng, 20);
        assert!(g.atom_count() >= 1 && g.atom_count() <= 20);
        g.validate().unwrap();
        assert!(is_valid(&g));
    }
}

#[test]
fn describe_examples() {
    let ethanol = describe(&smiles_to_graph("CCO").unwrap());
    assert!(ethanol.contains("hydroxy") && !ethanol.contains("ester"), "{ethanol}");
    let methane = describe(&smiles_to_graph("C").unwrap());
    assert_eq!(methane, "The molecule contains no listed functional groups. It has 0 rings and 0 aromatic rings.");
    let g = smiles_to_graph("OC1=CC=CC=C1").unwrap();
    assert_eq!(describe(&g), describe(&g));
    assert_eq!(
        describe(&g),
        "The molecule contains a hydroxy group and an aromatic ring. It has 1 rings and 1 aromatic rings."
    );
    let three = describe(&smiles_to_graph("COCC(N)CCl").unwrap());
    assert!(three.contains("an ether group, an amine group and a halide group"), "{three}");
}

#[test]
fn descriptions_are_faithful() {
    for r in corpus() {
        let g = selfies_to_graph(&r.selfies).unwrap();
        let named = groups_in_text(&r.description);
        assert_eq!(named, functional_groups(&g), "{}: {}", r.selfies, r.description);
        for grp in named {
            assert!(functional_group_match(&g, grp));
        }
    }
}

#[test]
fn every_group_is_represented() {
    let n = corpus().len() as f64;
    for grp in FunctionalGroup::ALL {
        let k = corpus().iter().filter(|r| groups_in_text(&r.description).contains(&grp)).count();
        assert!(k as f64 / n > 0.05, "{grp}: {k}");
    }
}

#[test]
fn identical_molecules_share_noise_free_profiles() {
    let map = PlantedMap::new(64, 0.0, 3).unwrap();
    let g = smiles_to_graph("CC(=O)OC").unwrap();
    let a = plant_omics(&g, &map, &mut ChaCha8Rng::seed_from_u64(1));
    let b = plant_omics(&g, &map, &mut ChaCha8Rng::seed_from_u64(2));
    assert_eq!(a, b);
}

#[test]
fn planted_map_column_norms() {
    for genes in [8, 64, 978] {
        let map = PlantedMap::new(genes, 0.3, 11).unwrap();
        for f in 0..FEATURES {
            assert!(map.column_norm(f) <= MAX_COLUMN_NORM + 1e-5, "K={genes} f={f}");
        }
        assert_eq!(map, PlantedMap::new(genes, 0.3, 11).unwrap());
    }
    assert!(PlantedMap::new(4, 0.3, 1).is_err());
}

#[test]
fn profiles_are_standardized() {
    let c = corpus();
    let n = c.len() as f64;
    let k = c[0].omics.len();
    assert_eq!(k, 978);
    for j in 0..k {
        let mean = c.iter().map(|r| r.omics[j] as f64).sum::<f64>() / n;
        let var = c.iter().map(|r| (r.omics[j] as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "gene {j} mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "gene {j} var {var}");
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn indicators(grp: FunctionalGroup) -> Vec<f64> {
    corpus()
        .iter()
        .map(|r| f64::from(u8::from(groups_in_text(&r.description).contains(&grp))))
        .collect()
}

#[test]
fn gene_blocks_track_their_groups() {
    let map = PlantedMap::new(978, 0.3, 7).unwrap();
    for grp in FunctionalGroup::ALL {
        let y = indicators(grp);
        let prevalence = y.iter().sum::<f64>() / y.len() as f64;
        // Correlation is capped by sqrt of signal variance, which vanishes
        // for rare groups; the corpus keeps every group above 10%.
        assert!(prevalence >= 0.1, "{grp} prevalence {prevalence}");
        let block: Vec<f64> = corpus()
            .iter()
            .map(|r| map.block(grp).map(|k| r.omics[k] as f64).sum::<f64>() / map.block_size() as f64)
            .collect();
        let r = pearson(&block, &y);
        assert!(r > 0.5, "{grp}: block r {r:.3}");
    }
}

#[test]
fn linear_probe_recovers_groups() {
    let c = corpus();
    let (train, test) = c.split_at(1500);
    // Ridge least squares on a strided 128-gene subset plus bias.
    let cols: Vec<usize> = (0..128).map(|j| j * 7 % 978).collect();
    let design = |rs: &[TextOmicsRecord]| {
        DMatrix::from_fn(rs.len(), cols.len() + 1, |i, j| if j == cols.len() { 1.0 } else { rs[i].omics[cols[j]] as f64 })
    };
    let xtr = design(train);
    let xte = design(test);
    let gram = xtr.transpose() * &xtr + DMatrix::identity(cols.len() + 1, cols.len() + 1) * 1.0;
    let chol = gram.cholesky().unwrap();
    for grp in FunctionalGroup::ALL {
        let label = |rs: &[TextOmicsRecord]| -> Vec<bool> {
            rs.iter().map(|r| groups_in_text(&r.description).contains(&grp)).collect()
        };
        let ytr = DVector::from_iterator(train.len(), label(train).into_iter().map(|b| f64::from(u8::from(b))));
        let w = chol.solve(&(xtr.transpose() * ytr));
        let pred = &xte * w;
        let truth = label(test);
        let pos = truth.iter().filter(|t| **t).count() as f64;
        let neg = truth.len() as f64 - pos;
        // Least squares on an unbalanced target is shifted toward the
        // majority class, so the cut sits midway between the class means.
        let mean_pos = pred.iter().zip(&truth).filter(|(_, t)| **t).map(|(p, _)| p).sum::<f64>() / pos;
        let mean_neg = pred.iter().zip(&truth).filter(|(_, t)| !**t).map(|(p, _)| p).sum::<f64>() / neg;
        let cut = 0.5 * (mean_pos + mean_neg);
        let tpr = pred.iter().zip(&truth).filter(|(p, t)| **t && **p > cut).count() as f64 / pos;
        let tnr = pred.iter().zip(&truth).filter(|(p, t)| !**t && **p <= cut).count() as f64 / neg;
        let bal = 0.5 * (tpr + tnr);
        assert!(bal >= 0.8, "{grp}: balanced accuracy {bal:.3}");
    }
}

#[test]
fn stats_columns() {
    let s = CorpusStats::compute(corpus()).unwrap();
    let v = serde_json::to_value(&s).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 8);
    for col in CorpusStats::COLUMNS {
        assert!(v.get(col).is_some(), "{col}");
    }
    assert_eq!(s.count, 2000);
    assert_eq!(s.omics_dim, 978);
    assert!((s.omics_variance - 1.0).abs() < 0.01);
    assert!(s.mol_weight > 16.0 && s.mean_selfies_len > 1.0);
}

#[test]
fn generate_load_round_trip_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatagenConfig { n: 150, genes: 32, ..DatagenConfig::default() };
    let a = generate_corpus(&cfg, &dir.path().join("a")).unwrap();
    let b = generate_corpus(&cfg, &dir.path().join("b")).unwrap();
    for (x, y) in [(&a.corpus, &b.corpus), (&a.stats, &b.stats), (&a.selfies_vocab, &b.selfies_vocab), (&a.text_vocab, &b.text_vocab)]
    {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
    let loaded = load_corpus(&a.corpus).unwrap();
    assert_eq!(loaded, generate_records(&cfg).unwrap());
    let stats = load_stats(&a.stats).unwrap();
    assert_eq!(stats.schema_version, SCHEMA_VERSION);
    assert_eq!(stats.stats.count, 150);
    let vocab = std::fs::read_to_string(&a.selfies_vocab).unwrap();
    todi::selfies::SelfiesVocabulary::from_text(&vocab).unwrap();
}

#[test]
fn records_do_not_depend_on_corpus_size() {
    // Per-record streams: the molecule and description of record i are the
    // same whatever n is; only standardization couples records.
    let small = generate_records(&DatagenConfig { n: 20, genes: 16, ..DatagenConfig::default() }).unwrap();
    let large = generate_records(&DatagenConfig { n: 60, genes: 16, ..DatagenConfig::default() }).unwrap();
    for (s, l) in small.iter().zip(&large) {
        assert_eq!((&s.id, &s.selfies, &s.description), (&l.id, &l.selfies, &l.description));
    }
}

#[test]
fn load_reports_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let good = r#"{"id":"a","selfies":"[C][O]","description":"x","omics":[0.0,1.0]}"#;
    let cases = [
        (format!("{good}\n{{not json\n"), 2),
        (format!("{good}\n{}\n", good.replace(r#""a""#, r#""b""#).replace("[0.0,1.0]", "[0.0]")), 2),
        (format!("{good}\n\n{good}\n"), 3),
        (format!("{}\n", good.replace(r#""x""#, r#""  ""#)), 1),
        (format!("{}\n", good.replace(r#""[C][O]""#, r#""[C][Xx]""#)), 1),
    ];
    for (text, line) in cases {
        std::fs::write(&path, text).unwrap();
        match load_corpus(&path) {
            Err(todi::Error::Data { line: l, .. }) => assert_eq!(l, line),
            other => panic!("expected a data error, got {other:?}"),
        }
    }
    std::fs::write(&path, format!("{good}\n")).unwrap();
    assert_eq!(load_corpus(&path).unwrap().len(), 1);
}

#[test]
fn unwritable_directory_errors() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let cfg = DatagenConfig { n: 5, genes: 16, ..DatagenConfig::default() };
    assert!(matches!(generate_corpus(&cfg, &blocker.join("sub")), Err(todi::Error::Io { .. })));
    let bad = DatagenConfig { max_atoms: 0, ..cfg };
    assert!(matches!(generate_corpus(&bad, dir.path()), Err(todi::Error::Config(_))));
}
