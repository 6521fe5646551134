use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::time::{Duration, Instant};

use neurotext::classifier::ClassPrediction;
use neurotext::textgen::*;
use proptest::prelude::*;
use rand::SeedableRng;

const CORPUS: &str = "the dog runs in the park\nthe cat sleeps on the mat\na bird sings in the tree\n";

fn prediction(name: &str) -> ClassPrediction {
    ClassPrediction {
        probs: vec![0.9, 0.1],
        label: 0,
        class_name: Some(name.to_string()),
    }
}

fn builtin(seed: u64) -> Backend {
    let spec = BackendSpec {
        seed,
        ..BackendSpec::default()
    };
    Backend::from_spec(&spec, Some(CORPUS)).unwrap()
}

#[test]
fn prompt_uses_the_paper_template() {
    let p = build_prompt(&PromptTemplate::default(), &prediction("Dog")).unwrap();
    assert_eq!(
        p,
        "Based on EEG signals classified as Dog, generate a relevant descriptive sentence: "
    );
}

#[test]
fn placeholder_in_the_class_name_is_not_expanded() {
    let t = PromptTemplate::new("<[CLASS]>").unwrap();
    assert_eq!(build_prompt(&t, &prediction("x[CLASS]y")).unwrap(), "<x[CLASS]y>");
}

#[test]
fn templates_need_exactly_one_placeholder() {
    assert!(matches!(PromptTemplate::new("no slot"), Err(TextgenError::Template(0))));
    assert!(matches!(
        PromptTemplate::new("[CLASS][CLASS]"),
        Err(TextgenError::Template(2))
    ));
    let unnamed = ClassPrediction {
        class_name: None,
        ..prediction("x")
    };
    assert!(matches!(
        build_prompt(&PromptTemplate::default(), &unnamed),
        Err(TextgenError::NoClassName(0))
    ));
}

#[test]
fn bigram_counts_by_hand() {
    let m = NgramModel::train("abab", 2, 1.0).unwrap();
    // Outcomes: a, b, begin, end, unknown.
    let v = m.vocab_size();
    assert_eq!(v, 5);
    let (a, b) = (m.token('a'), m.token('b'));
    // Bigrams of <s> a b a b </s>: (a, b) twice, a followed by anything twice.
    assert!((m.prob(&[a], b) - 3.0 / (2.0 + v as f64)).abs() < 1e-15);
    assert!((m.prob(&[b], EOS) - 2.0 / (2.0 + v as f64)).abs() < 1e-15);
    assert!((m.prob(&[BOS], a) - 2.0 / (1.0 + v as f64)).abs() < 1e-15);
    // A context never seen: uniform.
    assert!((m.prob(&[UNK], a) - 1.0 / v as f64).abs() < 1e-15);
}

#[test]
fn empty_corpus_is_rejected() {
    assert!(matches!(NgramModel::train("", 3, 1.0), Err(TextgenError::EmptyCorpus)));
    assert!(matches!(
        NgramModel::train("ab", 3, 1.0),
        Err(TextgenError::EmptyCorpus)
    ));
    assert!(NgramModel::train("abc", 0, 1.0).is_err());
}

proptest! {
    #[test]
    fn conditionals_sum_to_one(corpus in "[a-e ]{3,40}(\n[a-e ]{1,20}){0,3}", order in 1usize..4) {
        prop_assume!(corpus.chars().filter(|c| *c != '\n').count() >= order);
        let m = NgramModel::train(&corpus, order, 1.0).unwrap();
        for ctx in m.contexts() {
            prop_assert!((m.distribution(ctx).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        prop_assert!((m.distribution(&vec![UNK; order - 1]).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn bpc_inverts_to_perplexity(lps in prop::collection::vec(-10.0f64..0.0, 1..50)) {
        let ppl = perplexity(&lps).unwrap();
        let bits = bpc(ppl).unwrap();
        prop_assert_eq!(bits, ppl.log2());
        prop_assert!((2f64.powf(bits) - ppl).abs() <= 1e-9 * ppl);
    }
}

#[test]
fn builtin_generation_is_seeded() {
    let prompt = build_prompt(&PromptTemplate::default(), &prediction("Dog")).unwrap();
    let a = builtin(4).complete(&prompt, 40).unwrap();
    let b = builtin(4).complete(&prompt, 40).unwrap();
    assert_eq!(a, b);
    let lps = a.logprobs.unwrap();
    assert_eq!(lps.len(), a.tokens.len());
    assert!(lps.iter().all(|l| l.is_finite() && *l <= 0.0));
    let other = builtin(5).complete(&prompt, 40).unwrap();
    assert_ne!(a.tokens, other.tokens);
}

#[test]
fn generated_logprobs_match_rescoring() {
    let model = NgramModel::train(CORPUS, 3, 1.0).unwrap();
    let mut checked = 0;
    for seed in 0..20u64 {
        let prompt = format!("prompt {seed}: ");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (toks, lps) = model.sample(&prompt, 200, 1.0, &mut rng);
        if toks.last() != Some(&EOS) {
            continue;
        }
        // Any character outside the alphabet maps back to the unknown token.
        let text: String = toks[..toks.len() - 1]
            .iter()
            .map(|&t| {
                if t == UNK {
                    '\u{1}'
                } else {
                    model.token_str(t).chars().next().unwrap()
                }
            })
            .collect();
        assert_eq!(model.score(&prompt, &text), lps);
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn perplexity_closed_forms() {
    let uniform = vec![(1.0f64 / 256.0).ln(); 37];
    assert!((perplexity(&uniform).unwrap() - 256.0).abs() <= 1e-9);
    assert!((perplexity(&[0.5f64.ln()]).unwrap() - 2.0).abs() < 1e-15);
    assert!(matches!(perplexity(&[]), Err(TextgenError::EmptySequence)));
    assert!(matches!(
        perplexity(&[-1.0, 0.1]),
        Err(TextgenError::PositiveLogprob(_))
    ));
}

#[test]
fn bpc_examples() {
    assert_eq!(bpc(2.0).unwrap(), 1.0);
    assert_eq!(bpc(1.0).unwrap(), 0.0);
    assert!((bpc(24.81).unwrap() - 4.633).abs() < 5e-4);
    assert!(bpc(0.5).is_err());
}

/// Trigram probabilities rebuilt from a hand count over the corpus, then the
/// held-out perplexity from them.
#[test]
fn held_out_perplexity_matches_an_independent_count() {
    let model = NgramModel::train(CORPUS, 3, 1.0).unwrap();
    let held_out = "the dog sleeps in the tree";

    let mut tri: HashMap<(String, String), f64> = HashMap::new();
    let mut ctx_total: HashMap<String, f64> = HashMap::new();
    let frame = |line: &str| -> Vec<String> {
        let mut v = vec!["^".to_string(), "^".to_string()];
        v.extend(line.chars().map(|c| c.to_string()));
        v.push("$".to_string());
        v
    };
    let mut alphabet: Vec<char> = CORPUS.chars().filter(|c| *c != '\n').collect();
    alphabet.sort();
    alphabet.dedup();
    for line in CORPUS.lines() {
        let f = frame(line);
        for w in f.windows(3) {
            let ctx = format!("{}{}", w[0], w[1]);
            *tri.entry((ctx.clone(), w[2].clone())).or_default() += 1.0;
            *ctx_total.entry(ctx).or_default() += 1.0;
        }
    }
    let v = alphabet.len() as f64 + 3.0;
    let f = frame(held_out);
    let nll: f64 = f
        .windows(3)
        .map(|w| {
            let ctx = format!("{}{}", w[0], w[1]);
            let c = tri.get(&(ctx.clone(), w[2].clone())).copied().unwrap_or(0.0);
            let n = ctx_total.get(&ctx).copied().unwrap_or(0.0);
            -((c + 1.0) / (n + v)).ln()
        })
        .sum();
    let expected = (nll / (f.len() - 2) as f64).exp();

    let got = perplexity(&model.score("", held_out)).unwrap();
    assert!((got - expected).abs() <= 1e-9 * expected, "{got} vs {expected}");
}

#[test]
fn cross_entropy_form_agrees_for_a_context_free_model() {
    let model = NgramModel::train(CORPUS, 1, 1.0).unwrap();
    let text = "a cat in a hat";
    let lps = model.score("", text);
    let q = model.distribution(&[]);
    let mut p = vec![0.0; model.vocab_size()];
    let toks: Vec<u32> = text.chars().map(|c| model.token(c)).chain([EOS]).collect();
    for &t in &toks {
        p[t as usize] += 1.0 / toks.len() as f64;
    }
    let a = perplexity(&lps).unwrap();
    let b = perplexity_from_distributions(&p, &q);
    assert!((a - b).abs() <= 1e-12 * a, "{a} vs {b}");
}

#[test]
fn in_domain_text_scores_lower_than_a_foreign_alphabet() {
    let model = NgramModel::train(CORPUS, 3, 1.0).unwrap();
    let inside = perplexity(&model.score("", "the cat runs in the park")).unwrap();
    let outside = perplexity(&model.score("", "ЖЗИЙКЛМН ОПРС")).unwrap();
    assert!(inside < outside, "{inside} vs {outside}");
}

#[test]
fn uniform_backend_perplexity_is_the_vocabulary_size() {
    let spec = BackendSpec {
        kind: BackendKind::Uniform,
        ..BackendSpec::default()
    };
    let backend = Backend::from_spec(&spec, Some(CORPUS)).unwrap();
    let Backend::Ngram { model, .. } = &backend else {
        unreachable!()
    };
    let c = backend.complete("anything", 30).unwrap();
    let ppl = perplexity(&c.logprobs.unwrap()).unwrap();
    assert!((ppl - model.vocab_size() as f64).abs() <= 1e-9);
}

#[test]
fn backend_spec_validation() {
    let remote = BackendSpec {
        kind: BackendKind::Remote,
        ..BackendSpec::default()
    };
    assert!(matches!(
        Backend::from_spec(&remote, None),
        Err(TextgenError::Config(_))
    ));
    assert!(matches!(
        Backend::from_spec(&BackendSpec::default(), None),
        Err(TextgenError::Config(_))
    ));
    assert_eq!("builtin".parse::<BackendKind>().unwrap(), BackendKind::BuiltinNgram);
    assert!("gpt".parse::<BackendKind>().is_err());
}

fn remote(url: String, timeout_s: f64) -> Backend {
    let spec = BackendSpec {
        kind: BackendKind::Remote,
        url: Some(url),
        token: Some("sekrit".into()),
        timeout_s,
        ..BackendSpec::default()
    };
    Backend::from_spec(&spec, None).unwrap()
}

/// Serves one canned HTTP response and hands back the raw request.
fn one_shot_server(status: &'static str, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/complete", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut head = String::new();
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
            head.push_str(&line);
            if line == "\r\n" {
                break;
            }
        }
        let mut body_in = vec![0; len];
        reader.read_exact(&mut body_in).unwrap();
        let mut stream = stream;
        write!(stream, "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
        head + &String::from_utf8(body_in).unwrap()
    });
    (url, handle)
}

#[test]
fn remote_backend_round_trip() {
    let (url, server) = one_shot_server("200 OK", r#"{"tokens":["A"," dog"],"logprobs":[-0.5,-1.25]}"#);
    let c = remote(url, 5.0).complete("Describe a Dog", 8).unwrap();
    assert_eq!(c.tokens, vec!["A", " dog"]);
    assert_eq!(c.logprobs, Some(vec![-0.5, -1.25]));
    let request = server.join().unwrap();
    assert!(request.starts_with("POST /v1/complete"));
    assert!(request.contains("Authorization: Bearer sekrit") || request.contains("authorization: Bearer sekrit"));
    let body: serde_json::Value = serde_json::from_str(&request[request.find("\r\n\r\n").unwrap() + 4..]).unwrap();
    assert_eq!(body["prompt"], "Describe a Dog");
    assert_eq!(body["max_tokens"], 8);
    assert_eq!(body["logprobs"], true);
    assert_eq!(body["model"], "gemma-2b");
}

#[test]
fn remote_without_logprobs_is_flagged() {
    let (url, server) = one_shot_server("200 OK", r#"{"tokens":["ok"]}"#);
    let c = remote(url, 5.0).complete("p", 4).unwrap();
    server.join().unwrap();
    assert_eq!(c.logprobs, None);
    let g = GenerationResult {
        prompt: "p".into(),
        class_label: 0,
        class_name: "Dog".into(),
        class_probs: vec![1.0],
        tokens: c.tokens,
        logprobs: vec![],
        logprobs_available: false,
        backend: "remote:x".into(),
    };
    assert!(matches!(g.perplexity(), Err(TextgenError::NoLogprobs(_))));
}

#[test]
fn remote_error_status_is_reported() {
    let (url, server) = one_shot_server("503 Service Unavailable", "{}");
    let err = remote(url, 5.0).complete("p", 4).unwrap_err();
    server.join().unwrap();
    assert!(matches!(err, TextgenError::Status { code: 503, .. }), "{err}");
}

#[test]
fn unreachable_endpoint_names_the_url() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/gen", listener.local_addr().unwrap());
    drop(listener);
    let start = Instant::now();
    let err = remote(url.clone(), 2.0).complete("p", 4).unwrap_err();
    assert!(matches!(err, TextgenError::Transport { .. }), "{err}");
    assert!(err.to_string().contains(&url));
    assert!(start.elapsed() < Duration::from_secs(3));
}

#[test]
fn silent_endpoint_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/gen", listener.local_addr().unwrap());
    let start = Instant::now();
    let err = remote(url.clone(), 0.5).complete("p", 4).unwrap_err();
    assert!(matches!(err, TextgenError::Transport { .. }), "{err}");
    assert!(start.elapsed() < Duration::from_secs(3));
    drop(listener);
}

#[test]
fn ppl_table_columns() {
    let row = ppl_row(5, &[vec![0.5f64.ln(); 3], vec![0.25f64.ln(); 2]]).unwrap();
    assert_eq!(row.n_sequences, 2);
    assert!((row.mean_ppl - 3.0).abs() < 1e-12);
    assert_eq!(row.mean_bpc, row.mean_ppl.log2());
    let csv = ppl_csv(&[row]);
    assert!(csv.starts_with("n_classes,mean_ppl,mean_bpc,n_sequences\n5,"));
}

#[test]
fn unseen_prompt_tail_starts_a_fresh_line() {
    let m = NgramModel::train("ab\nab\n", 3, 1.0).unwrap();
    assert_eq!(m.context_after("zz"), vec![BOS, BOS]);
    assert_eq!(m.context_after("xa"), vec![BOS, BOS]);
    assert_eq!(m.context_after("ab"), vec![m.token('a'), m.token('b')]);
    assert_eq!(m.score("qq", "ab"), m.score("", "ab"));
}
