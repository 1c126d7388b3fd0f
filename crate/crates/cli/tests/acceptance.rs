//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use dfsqkd::optics::{channel_unitary, rotation_unitary};
use dfsqkd::protocol::{
    encode_state, encoded_target, exact_qber, key_rate, monte_carlo_qber, predicted_qber, Protocol,
    QberReport,
};
use dfsqkd::qstate::{apply_collective, overlap2, psi_minus};
use dfsqkd::session::{
    connect_bob, expected_summary, finalize, run_session, run_session_in_process, serve_alice,
    FinalizeInputs, FlatConfig, SessionConfig,
};
use dfsqkd::transport::{
    decode_frame, encode_frame, tcp_loopback_pair, ByePayload, DetectionsPayload, HelloPayload,
    InProcessTransport, Message, PackedBits, SampleBitsPayload, SampleRequestPayload,
    SiftKeepPayload,
};
use dfsqkd_cli::fringe::{angle_grid, run_fringe, FringeSpec};
use dfsqkd_cli::summary_json;
use dfsqkd_cli::sweep::{run_sweep, write_sweep_csv, SweepRow, SweepSpec};
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn within_budget(start: Instant, budget: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure!(
        took <= budget,
        "{what} took {:.1} s, budget {:.0} s",
        took.as_secs_f64(),
        budget.as_secs_f64()
    );
    Ok(())
}

const SWEEP_THETAS: [f64; 5] = [0.0, 10.0, 20.0, 30.0, 45.0];

/// Durations long enough for at least 1e5 sifted bits per point. BB84
/// keeps only the heralded half of the pairs.
const DFS_SWEEP_SECONDS: f64 = 52.0;
const BB84_SWEEP_SECONDS: f64 = 104.0;

fn sweep(protocol: Protocol, seconds: f64, exact: bool) -> Result<Vec<SweepRow>, String> {
    let spec = SweepSpec {
        thetas_deg: SWEEP_THETAS.to_vec(),
        protocols: vec![protocol],
        base: SessionConfig {
            duration_s: seconds,
            sample_fraction: 1.0,
            ..SessionConfig::default()
        },
        exact,
    };
    run_sweep(&spec).map_err(|e| e.to_string())
}

fn encoder_exactness() -> Outcome {
    let start = Instant::now();
    let mut worst = 1.0f64;
    for x in 0..2 {
        for y in 0..2 {
            let f = overlap2(&encode_state(x, y, &psi_minus()), &encoded_target(x, y));
            ensure!(f > 1.0 - 1e-9, "(x,y)=({x},{y}) overlap {f}");
            worst = worst.min(f);
        }
    }
    within_budget(start, Duration::from_secs(1), "encoder check")?;
    Ok(format!("min overlap 1 - {:.1e}", 1.0 - worst))
}

fn dfs_invariance() -> Outcome {
    let start = Instant::now();
    let mut worst_overlap = 1.0f64;
    let mut worst_channel = 0.0f64;
    for deg in -180..=180 {
        let theta = (deg as f64).to_radians();
        let u = rotation_unitary(theta);
        for x in 0..2 {
            for y in 0..2 {
                let state = encode_state(x, y, &psi_minus());
                let f = overlap2(&apply_collective(&u, &state), &state);
                ensure!(f > 1.0 - 1e-12, "θ={deg}° (x,y)=({x},{y}) overlap {f}");
                worst_overlap = worst_overlap.min(f);
            }
        }
        let d = channel_unitary(theta).distance(&u);
        ensure!(d < 1e-12, "θ={deg}°: channel differs from rotation by {d}");
        worst_channel = worst_channel.max(d);
    }
    within_budget(start, Duration::from_secs(1), "invariance grid")?;
    Ok(format!(
        "361 angles, min overlap 1 - {:.1e}, max channel deviation {:.1e}",
        1.0 - worst_overlap,
        worst_channel
    ))
}

fn qber_flatness() -> Outcome {
    let start = Instant::now();
    let rows = sweep(Protocol::Dfs2, DFS_SWEEP_SECONDS, false)?;
    let mut qs = Vec::new();
    for r in &rows {
        let (q, sd) = (
            r.qber.ok_or("no error estimate")?,
            r.qber_stderr.ok_or("no stderr")?,
        );
        ensure!(
            r.n_sifted >= 100_000,
            "θ={}°: only {} sifted bits",
            r.theta_deg,
            r.n_sifted
        );
        ensure!(
            (q - 0.06).abs() < 4.0 * sd,
            "θ={}°: qber {q:.5} outside 0.06 ± 4·{sd:.2e}",
            r.theta_deg
        );
        ensure!(
            (sd - 7.5e-4).abs() < 7.5e-5,
            "θ={}°: stderr {sd:.2e} not near 7.5e-4",
            r.theta_deg
        );
        ensure!(r.secure, "θ={}°: not secure", r.theta_deg);
        qs.push(q);
    }
    let spread =
        qs.iter().cloned().fold(f64::MIN, f64::max) - qs.iter().cloned().fold(f64::MAX, f64::min);
    ensure!(spread < 0.005, "spread {spread:.4}");
    let per_point = start.elapsed().as_secs_f64() / rows.len() as f64;
    ensure!(per_point < 30.0, "{per_point:.1} s per point");
    let list: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.4}", r.qber.unwrap()))
        .collect();
    Ok(format!("qber [{}], spread {spread:.4}", list.join(", ")))
}

fn bb84_sinusoid() -> Outcome {
    let rows = sweep(Protocol::Bb84, BB84_SWEEP_SECONDS, false)?;
    for r in &rows {
        let want = predicted_qber(Protocol::Bb84, r.theta_deg.to_radians(), 0.88);
        let (q, sd) = (
            r.qber.ok_or("no error estimate")?,
            r.qber_stderr.ok_or("no stderr")?,
        );
        ensure!(
            r.n_sifted >= 100_000,
            "θ={}°: only {} sifted bits",
            r.theta_deg,
            r.n_sifted
        );
        ensure!(
            (q - want).abs() < 4.0 * sd,
            "θ={}°: qber {q:.5} vs {want:.5} (σ {sd:.1e})",
            r.theta_deg
        );
        if want > 0.11 {
            ensure!(
                !r.secure && r.key_rate == 0.0,
                "θ={}°: above threshold but reported secure",
                r.theta_deg
            );
        } else {
            ensure!(r.secure, "θ={}°: below threshold but insecure", r.theta_deg);
        }
    }
    let dfs0 = sweep(Protocol::Dfs2, DFS_SWEEP_SECONDS, false)?[0];
    let bb0 = rows[0];
    let (qd, qb) = (dfs0.qber.unwrap(), bb0.qber.unwrap());
    let joint = dfs0.qber_stderr.unwrap().hypot(bb0.qber_stderr.unwrap());
    ensure!(
        (qd - qb).abs() < 4.0 * joint,
        "θ=0: BB84 {qb:.5} vs DFS {qd:.5}"
    );

    let mut worst = 0.0f64;
    for protocol in [Protocol::Dfs2, Protocol::Bb84] {
        let spec = SweepSpec {
            thetas_deg: (0..=18).map(|k| 5.0 * k as f64).collect(),
            protocols: vec![protocol],
            base: SessionConfig::default(),
            exact: true,
        };
        for r in run_sweep(&spec).map_err(|e| e.to_string())? {
            let theta = r.theta_deg.to_radians();
            let want = predicted_qber(protocol, theta, 0.88);
            let linear_algebra = exact_qber(protocol, theta, 0.88).map_err(|e| e.to_string())?;
            let d = (r.qber.unwrap() - want)
                .abs()
                .max((linear_algebra - want).abs());
            ensure!(
                d < 1e-9,
                "{protocol} exact mode at {}° off by {d:.1e}",
                r.theta_deg
            );
            worst = worst.max(d);
        }
    }
    let list: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.4}", r.qber.unwrap()))
        .collect();
    Ok(format!(
        "qber [{}], exact mode within {worst:.1e}",
        list.join(", ")
    ))
}

fn fringe_visibility() -> Outcome {
    let start = Instant::now();
    let spec = FringeSpec {
        visibility: 0.88,
        analyzer2_deg: 45.0,
        theta1_deg: angle_grid(0.0, 180.0, 5.0).map_err(|e| e.to_string())?,
        shots_per_point: 10_000,
        seed: SessionConfig::default().seeds.source,
        exact: false,
    };
    let r = run_fringe(&spec).map_err(|e| e.to_string())?;
    for (i, c) in r.curves.iter().enumerate() {
        ensure!(
            (c.visibility - 0.88).abs() <= 0.01,
            "curve {i}: visibility {:.4}",
            c.visibility
        );
    }
    ensure!(
        (r.phase_shift_deg - 90.0).abs() < 2.0,
        "phase shift {:.2}°",
        r.phase_shift_deg
    );
    within_budget(start, Duration::from_secs(5), "fringe scan")?;
    Ok(format!(
        "visibility {:.4} / {:.4}, curves {:.2}° apart",
        r.curves[0].visibility, r.curves[1].visibility, r.phase_shift_deg
    ))
}

fn rate_bookkeeping() -> Outcome {
    let start = Instant::now();
    let cfg = SessionConfig::default();
    let s = run_session_in_process(&cfg)
        .map_err(|e| e.to_string())?
        .summary;
    within_budget(start, Duration::from_secs(60), "default session")?;
    ensure!(s.n_slots == 5_000_000, "{} slots", s.n_slots);
    ensure!(
        (s.sifted_rate_hz - 2000.0).abs() <= 100.0,
        "sifted rate {:.1}/s",
        s.sifted_rate_hz
    );

    let exact_fraction = expected_summary(&cfg)
        .map_err(|e| e.to_string())?
        .multi_pair_fraction;
    let sd = (exact_fraction * (1.0 - exact_fraction) / s.n_coincidences as f64).sqrt();
    let f = s.multi_pair_fraction;
    ensure!((f - 0.020).abs() < 0.001, "multi-pair fraction {f:.4}");
    ensure!(
        (f - exact_fraction).abs() < 4.0 * sd,
        "multi-pair fraction {f:.5} vs {exact_fraction:.5}"
    );

    // the error bar refers to comparing the whole sifted key
    let full = SessionConfig {
        sample_fraction: 1.0,
        ..cfg
    };
    let q = run_session_in_process(&full)
        .map_err(|e| e.to_string())?
        .summary
        .qber
        .ok_or("no error estimate")?;
    ensure!(
        (5e-4..=1.5e-3).contains(&q.stderr),
        "stderr {:.2e}",
        q.stderr
    );
    let binomial = (q.qber * (1.0 - q.qber) / q.n_compared as f64).sqrt();
    ensure!(
        (q.stderr - binomial).abs() < 1e-12,
        "stderr is not binomial"
    );
    Ok(format!(
        "sifted {:.0}/s, stderr {:.2e} over {} bits, multi-pair {:.4}, {:.1} s",
        s.sifted_rate_hz,
        q.stderr,
        q.n_compared,
        f,
        start.elapsed().as_secs_f64()
    ))
}

fn key_rate_function() -> Outcome {
    let r0 = key_rate(0.0).map_err(|e| e.to_string())?;
    ensure!(
        (r0.rate - 1.0).abs() < 1e-12 && r0.secure,
        "rate(0) = {}",
        r0.rate
    );
    let r6 = key_rate(0.06).map_err(|e| e.to_string())?;
    ensure!(
        (r6.rate - 0.3452).abs() <= 1e-4 && r6.secure,
        "rate(0.06) = {}",
        r6.rate
    );
    for e in [0.11, 0.1100001, 0.15, 0.25, 0.5] {
        let r = key_rate(e).map_err(|e| e.to_string())?;
        ensure!(
            r.rate == 0.0 && !r.secure,
            "rate({e}) = {} secure={}",
            r.rate,
            r.secure
        );
    }
    Ok(format!(
        "rate(0) = {:.6}, rate(0.06) = {:.6}, rate(≥0.11) = 0",
        r0.rate, r6.rate
    ))
}

fn arb_message() -> impl Strategy<Value = Message> {
    let ascending = || {
        prop::collection::btree_set(any::<u64>(), 0..64)
            .prop_map(|s| s.into_iter().collect::<Vec<_>>())
    };
    let bits = |n: usize| prop::collection::vec(0u8..2, n).prop_map(|b| PackedBits::pack(&b));
    let detections = ascending().prop_flat_map(move |slots| {
        let n = slots.len();
        (
            Just(slots),
            bits(n),
            prop::option::of(bits(n)),
            prop::option::of(bits(n)),
        )
            .prop_map(|(slots, bases, b, m)| {
                Message::Detections(DetectionsPayload {
                    slots,
                    bases,
                    bits: b,
                    multi: m,
                })
            })
    });
    let hello = prop::option::of((any::<u64>(), 0.0f64..=1.0, -180.0f64..180.0, 1.0f64..1e3))
        .prop_map(|c| {
            Message::Hello(HelloPayload {
                config: c.map(|(seed, v, theta, dur)| FlatConfig {
                    seed_alice: seed,
                    visibility: v,
                    theta_deg: theta,
                    duration_s: dur,
                    ..FlatConfig::default()
                }),
            })
        });
    let summary = (
        1u64..1 << 40,
        0u64..1 << 30,
        0.0f64..=1.0,
        0.0f64..=1.0,
        0.0f64..=0.5,
    )
        .prop_map(|(slots, coinc, sift, multi, err)| {
            let n_sifted = (coinc as f64 * sift) as u64;
            let qber = (n_sifted > 0).then(|| {
                QberReport::from_counts(n_sifted, (n_sifted as f64 * err) as u64).unwrap()
            });
            Message::Summary(
                finalize(FinalizeInputs {
                    n_slots: slots,
                    duration_s: 50.0,
                    n_coincidences: coinc,
                    n_multi_pair: (coinc as f64 * multi) as u64,
                    n_sifted,
                    qber,
                    n_disclosed: n_sifted / 10,
                })
                .unwrap(),
            )
        });
    prop_oneof![
        hello,
        detections,
        ascending().prop_map(|keep| Message::SiftKeep(SiftKeepPayload { keep })),
        ascending()
            .prop_map(|positions| Message::SampleRequest(SampleRequestPayload { positions })),
        prop::collection::vec(0u8..2, 0..200).prop_map(|b| Message::SampleBits(
            SampleBitsPayload {
                bits: PackedBits::pack(&b)
            }
        )),
        summary,
        prop::option::of("[ -~]{0,40}").prop_map(|reason| Message::Bye(ByePayload { reason })),
    ]
}

fn determinism_and_transport() -> Outcome {
    let spec = SweepSpec {
        thetas_deg: vec![0.0, 20.0, 45.0],
        protocols: vec![Protocol::Dfs2, Protocol::Bb84],
        base: SessionConfig {
            duration_s: 5.0,
            ..SessionConfig::default()
        },
        exact: false,
    };
    let csv = || -> Result<Vec<u8>, String> {
        let mut out = Vec::new();
        write_sweep_csv(&run_sweep(&spec).map_err(|e| e.to_string())?, &mut out)
            .map_err(|e| e.to_string())?;
        Ok(out)
    };
    ensure!(csv()? == csv()?, "sweep CSV differs between identical runs");

    let cfg = SessionConfig {
        duration_s: 10.0,
        ..SessionConfig::default()
    };
    let (a, b) = InProcessTransport::pair();
    let local = run_session(&cfg, a, b).map_err(|e| e.to_string())?;
    let again = run_session_in_process(&cfg).map_err(|e| e.to_string())?;
    let (a, b) = tcp_loopback_pair().map_err(|e| e.to_string())?;
    let tcp = run_session(&cfg, a, b).map_err(|e| e.to_string())?;
    let local_json = summary_json(&local.summary).map_err(|e| e.to_string())?;
    ensure!(local == again, "repeated in-process sessions differ");
    ensure!(local == tcp, "in-process and loopback sessions differ");
    ensure!(
        local_json == summary_json(&tcp.summary).map_err(|e| e.to_string())?,
        "summary JSON differs"
    );

    let (mut a, mut b) = tcp_loopback_pair().map_err(|e| e.to_string())?;
    let (alice, bob) = thread::scope(|s| {
        let h = s.spawn(|| connect_bob(&cfg, &mut b));
        (serve_alice(&cfg, &mut a), h.join().unwrap())
    });
    let (alice, bob) = (
        alice.map_err(|e| e.to_string())?,
        bob.map_err(|e| e.to_string())?,
    );
    ensure!(
        alice == local.alice && bob == local.bob,
        "networked parties differ from in-process run"
    );

    let mut runner = TestRunner::new(ProptestConfig {
        cases: 1000,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    runner
        .run(&arb_message(), |m| {
            let frame = encode_frame(&m).unwrap();
            let back = decode_frame(&frame).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(encode_frame(&back).unwrap(), frame);
            Ok(())
        })
        .map_err(|e| format!("frame round trip: {e}"))?;
    Ok(format!(
        "CSV stable, {} sifted bits identical across transports, 1000 frames round-trip",
        local.summary.n_sifted
    ))
}

fn statistical_sanity() -> Outcome {
    const REPLICATES: u64 = 32;
    let shots = [1_000u64, 10_000, 100_000, 1_000_000, 10_000_000];
    let mut notes = Vec::new();
    for (protocol, deg) in [(Protocol::Dfs2, 30.0), (Protocol::Bb84, 20.0)] {
        let theta = f64::to_radians(deg);
        let exact = exact_qber(protocol, theta, 0.88).map_err(|e| e.to_string())?;
        let mut rms = Vec::new();
        for (k, &n) in shots.iter().enumerate() {
            let devs: Vec<f64> = (0..REPLICATES)
                .into_par_iter()
                .map(|r| {
                    let mut rng = ChaCha8Rng::seed_from_u64(1_000 * k as u64 + r);
                    monte_carlo_qber(protocol, theta, 0.88, n, &mut rng).map(|q| q.qber - exact)
                })
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            rms.push((devs.iter().map(|d| d * d).sum::<f64>() / REPLICATES as f64).sqrt());
        }
        ensure!(
            rms.windows(2).all(|w| w[1] < w[0]),
            "{protocol}: deviation not shrinking {rms:?}"
        );
        let xs: Vec<f64> = shots.iter().map(|&n| (n as f64).log10()).collect();
        let ys: Vec<f64> = rms.iter().map(|r| r.log10()).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / 5.0, ys.iter().sum::<f64>() / 5.0);
        let slope = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        ensure!(
            (slope + 0.5).abs() <= 0.1,
            "{protocol}: log-log slope {slope:.3}"
        );
        notes.push(format!("{protocol} slope {slope:.3}"));
    }
    Ok(notes.join(", "))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("encoder exactness", encoder_exactness),
        ("DFS invariance", dfs_invariance),
        ("QBER flatness", qber_flatness),
        ("BB84 sinusoid", bb84_sinusoid),
        ("fringe visibility", fringe_visibility),
        ("rate bookkeeping", rate_bookkeeping),
        ("key-rate function", key_rate_function),
        (
            "determinism and transport substitution",
            determinism_and_transport,
        ),
        ("statistical sanity", statistical_sanity),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(format!(
                "panicked: {}",
                p.downcast_ref::<String>().cloned().unwrap_or_default()
            ))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail} ({secs:.2} s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {detail} ({secs:.2} s)", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
