use super::*;

fn rec(id: &str, q: &str, a: &str) -> QARecord {
    QARecord::new(id, q, a)
}

fn corpus() -> Vec<QARecord> {
    vec![
        rec(
            "r0",
            "Where was Mira Olsen born?",
            "Mira Olsen was born in Harbor Vale.",
        ),
        rec(
            "r1",
            "What genre does Tomas Reyes write?",
            "Tomas Reyes writes gothic poetry.",
        ),
        rec(
            "r2",
            "Where was Ilse Brandt born?",
            "Ilse Brandt was born in North Fenwick.",
        ),
        rec(
            "r3",
            "What award did Sana Iqbal win?",
            "Sana Iqbal won the Lantern Prize.",
        ),
        rec(
            "r4",
            "Who were the parents of Leo Marsh?",
            "His father was a baker and his mother a pilot.",
        ),
        rec(
            "r5",
            "Where was Ada Kwan born?",
            "Ada Kwan was born in Port Meridian.",
        ),
        rec(
            "r6",
            "What is the first book by Omar Nasser?",
            "The first book by Omar Nasser is Salt Roads.",
        ),
        rec(
            "r7",
            "What genre does Elin Roth write?",
            "Elin Roth writes crime fiction.",
        ),
        rec(
            "r8",
            "When was Paul Ekwe born?",
            "Paul Ekwe was born in 1961.",
        ),
        rec(
            "r9",
            "What award did Nora Vitale win?",
            "Nora Vitale won the Amber Quill.",
        ),
    ]
}

fn forget() -> QARecord {
    rec(
        "f0",
        "Where was Jon Harte born?",
        "Jon Harte was born in Harbor Vale.",
    )
}

#[test]
fn hashed_embedding_is_unit_and_self_similar() {
    let p = HashedNgram::default();
    let e = embed("the quick brown fox", &p).unwrap();
    assert!((e.norm() - 1.0).abs() < 1e-12);
    assert!((e.cosine(&e).unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(e.dim(), 1 << 15);
    assert!(matches!(embed("  ", &p), Err(NormalError::EmptyText)));
}

#[test]
fn disjoint_characters_are_orthogonal() {
    let p = HashedNgram::default();
    let a = p.embed("aaabbb").unwrap();
    let b = p.embed("xyzxyz").unwrap();
    let shared: Vec<usize> = a
        .entries()
        .iter()
        .filter(|(i, _)| b.entries().iter().any(|(j, _)| i == j))
        .map(|e| e.0)
        .collect();
    assert!(shared.is_empty(), "hash collision in fixture strings");
    assert_eq!(a.cosine(&b).unwrap(), 0.0);
}

#[test]
fn cosine_is_symmetric_and_bounded() {
    let texts: Vec<String> = corpus().iter().map(|r| r.text()).collect();
    let p = HashedNgram::default().fit(&texts);
    for a in &texts {
        for b in &texts {
            let (ea, eb) = (p.embed(a).unwrap(), p.embed(b).unwrap());
            let c = ea.cosine(&eb).unwrap();
            assert!((-1.0..=1.0).contains(&c));
            assert_eq!(c, eb.cosine(&ea).unwrap());
        }
    }
}

#[test]
fn exact_copy_ranks_first() {
    let mut retain = corpus();
    let f = forget();
    retain.push(rec("copy", &f.question, &f.answer));
    let p = HashedNgram::default();
    let out = select_similar_retain(&f, &retain, 3, 0.0, &p).unwrap();
    assert_eq!(out[0].answer, f.answer);
    assert!((out[0].similarity.unwrap() - 1.0).abs() < 1e-9);
    assert!(out.windows(2).all(|w| w[0].similarity >= w[1].similarity));
}

#[test]
fn unsatisfiable_threshold_gives_fallbacks() {
    let p = HashedNgram::default();
    let out = select_similar_retain(&forget(), &corpus(), 3, 1.1, &p).unwrap();
    assert_eq!(out.len(), 3);
    assert!(out
        .iter()
        .all(|c| c.provenance == Provenance::Fallback && c.similarity.is_none()));
    assert_eq!(out[0].answer, "I don't know.");
}

#[test]
fn selection_matches_exhaustive_sort() {
    let retain = corpus();
    let f = forget();
    let p = HashedNgram::default().fit(&retain.iter().map(|r| r.text()).collect::<Vec<_>>());
    let q = p.embed(&f.text()).unwrap();
    let mut all: Vec<(usize, f64)> = retain
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let e = p.embed(&r.text()).unwrap();
            let dot: f64 = q.dense().iter().zip(e.dense()).map(|(a, b)| a * b).sum();
            (i, dot)
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let out = select_similar_retain(&f, &retain, 3, -1.0, &p).unwrap();
    for (c, (i, s)) in out.iter().zip(&all) {
        assert_eq!(c.answer, retain[*i].answer);
        assert!((c.similarity.unwrap() - s).abs() < 1e-12);
    }
}

#[test]
fn empty_retain_without_fallback_errors() {
    let p = HashedNgram::default();
    let idx = SimilarityIndex::build(&[], &p).unwrap();
    assert!(matches!(
        idx.select(&forget(), 2, 0.3, false),
        Err(NormalError::Shortfall { .. })
    ));
    assert_eq!(idx.select(&forget(), 2, 0.3, true).unwrap().len(), 2);
}

#[test]
fn fallback_rotation() {
    let f = forget();
    let answers: Vec<String> = (0..3)
        .map(|i| fallback_safe_response(&f, i).answer)
        .collect();
    assert_eq!(answers[0], "I don't know.");
    assert_eq!(fallback_safe_response(&f, 0), fallback_safe_response(&f, 0));
    assert!(answers[0] != answers[1] && answers[1] != answers[2] && answers[0] != answers[2]);
    assert_eq!(fallback_safe_response(&f, 4).question, f.question);
}

#[test]
fn fallback_only_counts() {
    let forget: Vec<QARecord> = (0..5).map(|i| rec(&format!("f{i}"), "Q?", "A.")).collect();
    let b = build_normal_set(&forget, 3, &NormalSource::FallbackOnly).unwrap();
    assert_eq!(b.set.len(), 5);
    assert_eq!(
        b.set
            .entries()
            .iter()
            .map(|e| e.companions.len())
            .sum::<usize>(),
        15
    );
    assert!(b.substitutions.is_empty());
}

#[test]
fn duplicates_are_all_selected_and_round_trip() {
    let retain = corpus();
    let forget: Vec<QARecord> = retain[..4]
        .iter()
        .map(|r| rec(&format!("f-{}", r.id), &r.question, &r.answer))
        .collect();
    let mut pool = retain.clone();
    for r in &retain[..4] {
        for k in 0..2 {
            pool.push(rec(&format!("{}-dup{k}", r.id), &r.question, &r.answer));
        }
    }
    let p = HashedNgram::default();
    let src = NormalSource::Similarity {
        retain: &pool,
        provider: &p,
        threshold: DEFAULT_THRESHOLD,
    };
    let b = build_normal_set(&forget, 3, &src).unwrap();
    for e in b.set.entries() {
        assert!(e
            .companions
            .iter()
            .all(|c| c.provenance == Provenance::Selected));
        assert!(e
            .companions
            .iter()
            .all(|c| c.similarity.unwrap() >= DEFAULT_THRESHOLD));
    }
    let again = build_normal_set(&forget, 3, &src).unwrap();
    assert_eq!(b, again);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("normal.jsonl");
    b.set.save(&path).unwrap();
    assert_eq!(NormalSet::load(&path).unwrap(), b.set);
}

#[test]
fn corpus_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let mut c = corpus();
    c[0].paraphrased_answer = Some("Harbor Vale is where Mira Olsen was born.".into());
    c[0].perturbed_answers = Some(vec!["Mira Olsen was born in Kestrel.".into()]);
    write_corpus(&path, &c).unwrap();
    assert_eq!(read_corpus(&path).unwrap(), c);
    c.push(c[1].clone());
    assert!(matches!(
        validate_corpus(&c),
        Err(NormalError::DuplicateId(_))
    ));
    assert!(rec("x", "", "a").validate().is_err());
}

#[test]
fn model_embedding_is_unit() {
    use crate::lm::{Checkpoint, ModelConfig, Vocabulary};
    let cfg = ModelConfig {
        vocab_size: 260,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 64,
        seed: 3,
    };
    let ck = Checkpoint::init(cfg).unwrap();
    let vocab = Vocabulary::bytes_only();
    let p = ModelEmbedding {
        checkpoint: &ck,
        vocab: &vocab,
    };
    let e = p.embed("hello there").unwrap();
    assert_eq!(e.dim(), 8);
    assert!((e.cosine(&e).unwrap() - 1.0).abs() < 1e-9);
}
